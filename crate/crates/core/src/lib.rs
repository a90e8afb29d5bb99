//! Numerics for studying and removing the time-Lipschitz singularity of
//! diffusion-model predictors near `t = 0`.

pub mod checkpoint;
pub mod error;
pub mod linalg;
pub mod lipschitz;
pub mod metrics;
pub mod mixture;
pub mod mlp;
pub mod predictor;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod sharing;
pub mod train;

pub use error::{Error, Result};
