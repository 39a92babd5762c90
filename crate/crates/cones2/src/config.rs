//! Run configuration: one JSON file drives every command, and its hash
//! stamps every artifact the run produces.

use crate::diffusion::denoiser::DenoiserConfig;
use crate::diffusion::pretrain::{OptKind, PretrainConfig};
use crate::diffusion::sampler::SamplerConfig;
use crate::diffusion::schedule::ScheduleKind;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::layout::{EtaForm, GuidanceConfig};
use crate::params::hex_string;
use crate::residual::TrainingConfig;
use crate::text::Vocabulary;
use crate::world::SceneGenConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub d_text: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub channels: usize,
    pub image_size: usize,
    pub attn_heads: usize,
    pub groups: usize,
    pub t_max: usize,
    pub schedule: ScheduleKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_text: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 16,
            channels: 64,
            image_size: 16,
            attn_heads: 2,
            groups: 8,
            t_max: 1000,
            schedule: ScheduleKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final_frac: f64,
    pub ema_decay: f64,
    pub min_snr_gamma: f64,
    pub p_uncond: f64,
    pub seed: u64,
    pub optimizer: OptKind,
    pub freeze_encoder: bool,
    pub scenes: usize,
    pub two_shape_prob: f64,
    pub data_seed: u64,
    pub log_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 9000,
            batch_size: 8,
            lr: 2e-3,
            lr_final_frac: 0.1,
            ema_decay: 0.999,
            min_snr_gamma: 5.0,
            p_uncond: 0.1,
            seed: 0,
            optimizer: OptKind::Adam,
            freeze_encoder: false,
            scenes: 4096,
            two_shape_prob: 0.35,
            data_seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub corpus_count: usize,
    pub reg_batch: usize,
    pub seed: u64,
    pub corpus_seed: u64,
    pub freeze_token_table: bool,
    pub reference_images: usize,
    pub subject_seed: u64,
}

impl Default for ResidualSection {
    fn default() -> Self {
        ResidualSection {
            steps: 500,
            lr: 1e-4,
            batch_size: 1,
            lambda: 0.01,
            corpus_count: 200,
            reg_batch: 8,
            seed: 0,
            corpus_seed: 0,
            freeze_token_table: false,
            reference_images: 4,
            subject_seed: 0,
        }
    }
}

/// The full-scale recipe: 3000 steps at 1e-6, batch size 1.
impl ResidualSection {
    pub fn paper_preset(mut self) -> Self {
        self.steps = 3000;
        self.lr = 1e-6;
        self.batch_size = 1;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSection {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub eta_form: EtaForm,
    pub eta_peak: f64,
    pub guide_steps: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            gamma_plus: 2.5,
            gamma_minus: -1e-5,
            eta_form: EtaForm::Sqrt,
            eta_peak: 1.0,
            guide_steps: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub steps: usize,
    pub scale: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { steps: 50, scale: 7.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub registry: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { registry: "registry".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub residual: ResidualSection,
    pub guidance: GuidanceSection,
    pub sampler: SamplerSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::toy().with_context_len(self.model.context_len)
    }

    pub fn encoder_config(&self, vocab: &Vocabulary) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.size(),
            context_len: self.model.context_len,
            d_text: self.model.d_text,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 3,
            image_size: self.model.image_size,
            channels: self.model.channels,
            n_heads: self.model.attn_heads,
            d_text: self.model.d_text,
            groups: self.model.groups,
            t_max: self.model.t_max,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            lr_final_frac: self.pretrain.lr_final_frac,
            ema_decay: self.pretrain.ema_decay,
            min_snr_gamma: self.pretrain.min_snr_gamma,
            p_uncond: self.pretrain.p_uncond,
            seed: self.pretrain.seed,
            optimizer: self.pretrain.optimizer,
            freeze_encoder: self.pretrain.freeze_encoder,
            log_every: self.pretrain.log_every,
        }
    }

    pub fn scene_config(&self) -> SceneGenConfig {
        SceneGenConfig {
            n_scenes: self.pretrain.scenes,
            canvas: self.model.image_size,
            seed: self.pretrain.data_seed,
            two_shape_prob: self.pretrain.two_shape_prob,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            lr: self.residual.lr,
            steps: self.residual.steps,
            batch_size: self.residual.batch_size,
            lambda: self.residual.lambda,
            corpus_count: self.residual.corpus_count,
            reg_batch: self.residual.reg_batch,
            seed: self.residual.seed,
            freeze_token_table: self.residual.freeze_token_table,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            gamma_plus: self.guidance.gamma_plus,
            gamma_minus: self.guidance.gamma_minus,
            eta_form: self.guidance.eta_form,
            eta_peak: self.guidance.eta_peak,
            guide_steps: self.guidance.guide_steps,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { steps: self.sampler.steps, guidance_scale: self.sampler.scale, clip_predicted: true }
    }
}
