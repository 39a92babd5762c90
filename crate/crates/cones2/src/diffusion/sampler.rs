//! Deterministic (eta = 0) reverse-process sampler with classifier-free
//! guidance. An optional per-step attention editor is applied to the
//! conditional branch only; the unconditional prompt carries no subject
//! tokens so masks would be undefined there.

use crate::diffusion::denoiser::{
    predict_noise, AttnContext, CrossAttentionRecord, DenoiserParams,
};
use crate::diffusion::schedule::NoiseSchedule;
use crate::encoder::EmbeddingSequence;
use crate::error::Result;
use crate::latent::LatentImage;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Clamp the predicted clean image to [-1, 1] at every step. Keeps
    /// high guidance scales on the data manifold.
    #[serde(default = "default_clip")]
    pub clip_predicted: bool,
}

fn default_clip() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, guidance_scale: 7.5, clip_predicted: true }
    }
}

/// Per-step attention editing, `step` counts sampler iterations from 0
/// (t = T) upward.
pub trait StepEditor {
    fn edit(&self, step: usize, ctx: &AttnContext, logits: &Tensor) -> Tensor;
}

/// Conditional-branch attention records for one sampler step.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub step: usize,
    pub timestep: usize,
    pub records: Vec<CrossAttentionRecord>,
}

pub fn sample(
    dn: &DenoiserParams,
    emb_cond: &EmbeddingSequence,
    emb_uncond: &EmbeddingSequence,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
    editor: Option<&dyn StepEditor>,
) -> Result<LatentImage> {
    Ok(sample_traced(dn, emb_cond, emb_uncond, schedule, cfg, seed, editor, false)?.0)
}

#[allow(clippy::too_many_arguments)]
pub fn sample_traced(
    dn: &DenoiserParams,
    emb_cond: &EmbeddingSequence,
    emb_uncond: &EmbeddingSequence,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
    editor: Option<&dyn StepEditor>,
    collect: bool,
) -> Result<(LatentImage, Vec<StepTrace>)> {
    assert!(cfg.steps >= 1);
    let t_max = schedule.t_max();
    let timestep = |i: usize| ((i as f64 / cfg.steps as f64) * t_max as f64).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = dn.cfg.in_channels;
    let s = dn.cfg.image_size;
    let mut x = LatentImage::randn(c, s, s, &mut rng);
    let mut traces = Vec::new();

    for i in (1..=cfg.steps).rev() {
        let t = timestep(i);
        let t_next = timestep(i - 1);
        let step = cfg.steps - i;

        let records;
        let eps_cond = match editor {
            Some(ed) => {
                let hook = move |ctx: &AttnContext, logits: &Tensor| ed.edit(step, ctx, logits);
                let (e, r) = predict_noise(dn, &x, emb_cond, t, Some(&hook))?;
                records = r;
                e
            }
            None => {
                let (e, r) = predict_noise(dn, &x, emb_cond, t, None)?;
                records = r;
                e
            }
        };
        if collect {
            traces.push(StepTrace { step, timestep: t, records });
        }
        let (eps_uncond, _) = predict_noise(dn, &x, emb_uncond, t, None)?;

        // eps = eps_u + scale * (eps_c - eps_u)
        let mut eps = eps_cond.into_tensor();
        eps.axpy_in_place(-1.0, eps_uncond.tensor());
        eps.scale_in_place(cfg.guidance_scale);
        eps.add_in_place(eps_uncond.tensor());

        // deterministic reverse update through the predicted clean image
        let (a_t, s_t) = (schedule.alpha(t), schedule.sigma(t));
        let (a_n, s_n) = (schedule.alpha(t_next), schedule.sigma(t_next));
        let clip = cfg.clip_predicted;
        let xd = x.tensor_mut().data_mut();
        for (xv, ev) in xd.iter_mut().zip(eps.data()) {
            let mut x0 = (*xv - s_t * ev) / a_t;
            if clip {
                x0 = x0.clamp(-1.0, 1.0);
            }
            *xv = a_n * x0 + s_n * ev;
        }
    }
    x.clamp_in_place(-1.0, 1.0);
    Ok((x, traces))
}
