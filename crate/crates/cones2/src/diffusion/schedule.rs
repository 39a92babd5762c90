//! Variance-preserving noise schedules: x_t = alpha_t * x + sigma_t * eps
//! with alpha^2 + sigma^2 = 1 at every step.

use crate::error::{Error, Result};
use crate::latent::LatentImage;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// Terminal signal level; keeps 1/alpha_T finite for the deterministic
/// reverse update.
const ALPHA_FINAL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Validation(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Validation("schedule needs T >= 1".into()));
    }
    let mut alphas = Vec::with_capacity(t_max + 1);
    let mut sigmas = Vec::with_capacity(t_max + 1);
    let theta_max = ALPHA_FINAL.acos();
    for t in 0..=t_max {
        let f = t as f64 / t_max as f64;
        let (a, s) = match kind {
            ScheduleKind::Cosine => {
                let th = f * theta_max;
                (th.cos(), th.sin())
            }
            ScheduleKind::Linear => {
                let s2 = f * (1.0 - ALPHA_FINAL * ALPHA_FINAL);
                ((1.0 - s2).sqrt(), s2.sqrt())
            }
        };
        alphas.push(a);
        sigmas.push(s);
    }
    Ok(NoiseSchedule { t_max, alphas, sigmas })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }
}

/// x_t = alpha_t * x + sigma_t * eps
pub fn forward_diffuse(
    x: &LatentImage,
    t: usize,
    eps: &LatentImage,
    s: &NoiseSchedule,
) -> Result<LatentImage> {
    if x.tensor().shape() != eps.tensor().shape() {
        return Err(Error::Validation(format!(
            "image {:?} and noise {:?} shapes differ",
            x.tensor().shape(),
            eps.tensor().shape()
        )));
    }
    if t > s.t_max() {
        return Err(Error::Validation(format!("t={t} outside schedule 0..={}", s.t_max())));
    }
    let (a, sg) = (s.alpha(t), s.sigma(t));
    let mut out = x.clone();
    for (o, e) in out.tensor_mut().data_mut().iter_mut().zip(eps.tensor().data()) {
        *o = a * *o + sg * e;
    }
    Ok(out)
}
