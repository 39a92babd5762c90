//! Subject customization for a toy text-conditioned diffusion model:
//! residual token embeddings learned per subject, a portable registry for
//! composing them without retraining, and layout-guided cross-attention
//! editing that places each subject inside its user box.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod latent;
pub mod layout;
pub mod optim;
pub mod params;
pub mod registry;
pub mod residual;
pub mod tensor;
pub mod text;
pub mod world;

pub use error::{Error, Result};
