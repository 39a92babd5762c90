//! Base-model pretraining: joint noise-prediction training of the denoiser
//! and the text encoder on captioned toy scenes, with random caption
//! dropout for classifier-free guidance.

use crate::autodiff::Graph;
use crate::diffusion::denoiser::{denoise_nodes, DenoiserParams};
use crate::diffusion::schedule::{forward_diffuse, NoiseSchedule};
use crate::encoder::{encode_nodes, EncoderParams};
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::optim::{Adam, Sgd};
use crate::params::{GradMap, ParamNodes};
use crate::text::TokenizedPrompt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate decays linearly to lr * lr_final_frac.
    pub lr_final_frac: f64,
    /// Probability of replacing the caption with the empty prompt.
    pub p_uncond: f64,
    pub seed: u64,
    pub optimizer: OptKind,
    pub freeze_encoder: bool,
    /// Exponential moving average of the weights; the returned model.
    /// 0 disables averaging.
    pub ema_decay: f64,
    /// Min-SNR loss weighting cap; 0 disables weighting.
    pub min_snr_gamma: f64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 8,
            lr: 2e-3,
            lr_final_frac: 0.1,
            p_uncond: 0.1,
            seed: 0,
            optimizer: OptKind::Adam,
            freeze_encoder: false,
            ema_decay: 0.999,
            min_snr_gamma: 5.0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// One training example: the item index, timestep, noise draw and whether
/// the caption is dropped. Drawn sequentially up front so the parallel
/// batch is schedule-independent.
struct Draw {
    item: usize,
    t: usize,
    eps: LatentImage,
    uncond: bool,
}

fn item_loss(
    dn: &DenoiserParams,
    enc: &EncoderParams,
    image: &LatentImage,
    prompt: &TokenizedPrompt,
    draw: &Draw,
    schedule: &NoiseSchedule,
    train_encoder: bool,
    min_snr_gamma: f64,
) -> Result<(f64, GradMap, GradMap)> {
    let x_t = forward_diffuse(image, draw.t, &draw.eps, schedule)?;
    let mut g = Graph::new();
    let mut pn_enc = ParamNodes::new(train_encoder);
    let mut pn_dn = ParamNodes::new(true);
    let emb = encode_nodes(&mut g, &mut pn_enc, enc, prompt);
    let (eps_pred, _) = denoise_nodes(&mut g, &mut pn_dn, dn, &x_t, emb, draw.t, None, false)?;
    let target = g.constant(draw.eps.tensor().clone());
    let mut loss = g.mse(eps_pred, target);
    if min_snr_gamma > 0.0 {
        let a = schedule.alpha(draw.t);
        let sg = schedule.sigma(draw.t);
        let snr = (a * a) / (sg * sg).max(1e-12);
        loss = g.scale(loss, snr.min(min_snr_gamma) / snr);
    }
    let loss_val = g.value(loss).data()[0];
    g.backward(loss);
    let gd = pn_dn.grads(&g, &dn.params);
    let ge = if train_encoder {
        pn_enc.grads(&g, &enc.params)
    } else {
        GradMap::default()
    };
    Ok((loss_val, gd, ge))
}

/// Reconstruction loss on one example with gradients for both the
/// denoiser and the encoder; the building block of pretraining, exposed
/// for gradient verification.
pub fn reconstruction_loss_with_grads(
    dn: &DenoiserParams,
    enc: &EncoderParams,
    image: &LatentImage,
    prompt: &TokenizedPrompt,
    t: usize,
    eps: &LatentImage,
    schedule: &NoiseSchedule,
) -> Result<(f64, GradMap, GradMap)> {
    let draw = Draw { item: 0, t, eps: eps.clone(), uncond: false };
    item_loss(dn, enc, image, prompt, &draw, schedule, true, 0.0)
}

/// Minimizes the noise-prediction reconstruction loss. Returns the trained
/// denoiser, the (optionally frozen) encoder and the loss trajectory.
pub fn pretrain_base(
    items: &[(LatentImage, TokenizedPrompt)],
    uncond_prompt: &TokenizedPrompt,
    enc0: &EncoderParams,
    dn0: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    mut progress: impl FnMut(&LossPoint),
) -> Result<(DenoiserParams, EncoderParams, Vec<LossPoint>)> {
    if items.is_empty() {
        return Err(Error::Validation("pretraining dataset is empty".into()));
    }
    let mut dn = dn0.clone();
    let mut enc = enc0.clone_params();
    let mut ema_dn = dn0.clone();
    let mut ema_enc = enc0.clone_params();
    let train_encoder = !cfg.freeze_encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, s) = (dn.cfg.in_channels, dn.cfg.image_size);

    let mut opt_dn_adam = Adam::new(cfg.lr);
    let mut opt_enc_adam = Adam::new(cfg.lr);

    let mut trajectory = Vec::new();
    for step in 0..cfg.steps {
        // linear learning-rate decay
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let lr_now = cfg.lr * (1.0 - (1.0 - cfg.lr_final_frac) * frac);
        let draws: Vec<Draw> = (0..cfg.batch_size)
            .map(|_| Draw {
                item: rng.random_range(0..items.len()),
                t: rng.random_range(1..=schedule.t_max()),
                eps: LatentImage::randn(c, s, s, &mut rng),
                uncond: rng.random::<f64>() < cfg.p_uncond,
            })
            .collect();

        let results: Vec<Result<(f64, GradMap, GradMap)>> = draws
            .par_iter()
            .map(|d| {
                let (image, prompt) = &items[d.item];
                let prompt = if d.uncond { uncond_prompt } else { prompt };
                item_loss(&dn, &enc, image, prompt, d, schedule, train_encoder, cfg.min_snr_gamma)
            })
            .collect();

        let mut loss_sum = 0.0;
        let mut gd = GradMap::default();
        let mut ge = GradMap::default();
        let inv = 1.0 / cfg.batch_size as f64;
        for r in results {
            let (l, d, e) = r?;
            loss_sum += l;
            gd.add_scaled(&d, inv);
            ge.add_scaled(&e, inv);
        }
        let loss = loss_sum * inv;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite pretraining loss {loss} at step {step}"
            )));
        }

        match cfg.optimizer {
            OptKind::Adam => {
                opt_dn_adam.lr = lr_now;
                opt_enc_adam.lr = lr_now;
                opt_dn_adam.step(&mut dn.params, &gd);
                if train_encoder {
                    opt_enc_adam.step(&mut enc.params, &ge);
                }
            }
            OptKind::Sgd => {
                let opt = Sgd::new(lr_now);
                opt.step(&mut dn.params, &gd, &[]);
                if train_encoder {
                    opt.step(&mut enc.params, &ge, &[]);
                }
            }
        }
        if cfg.ema_decay > 0.0 {
            let d = cfg.ema_decay;
            for ((_, e), (_, p)) in ema_dn.params.iter_mut().zip(dn.params.iter()) {
                e.scale_in_place(d);
                e.axpy_in_place(1.0 - d, p);
            }
            if train_encoder {
                for ((_, e), (_, p)) in ema_enc.params.iter_mut().zip(enc.params.iter()) {
                    e.scale_in_place(d);
                    e.axpy_in_place(1.0 - d, p);
                }
            }
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let point = LossPoint { step, loss };
            progress(&point);
            trajectory.push(point);
        }
    }
    let (dn, enc) = if cfg.ema_decay > 0.0 { (ema_dn, ema_enc) } else { (dn, enc) };
    if !dn.params.all_finite() || !enc.params.all_finite() {
        return Err(Error::Numerical("non-finite parameters after pretraining".into()));
    }
    Ok((dn, enc, trajectory))
}
