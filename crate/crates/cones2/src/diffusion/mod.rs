//! Forward diffusion, the conditional denoiser, base-model pretraining and
//! the deterministic guided sampler.

pub mod denoiser;
pub mod pretrain;
pub mod sampler;
pub mod schedule;

pub use denoiser::{
    predict_noise, AttnContext, AttnEditor, CrossAttentionRecord, DenoiserConfig, DenoiserParams,
};
pub use pretrain::{pretrain_base, LossPoint, OptKind, PretrainConfig};
pub use sampler::{sample, sample_traced, SamplerConfig, StepEditor, StepTrace};
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule, ScheduleKind};
