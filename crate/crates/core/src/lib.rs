//! Conditional flow matching for temporally consistent motion-latent
//! sequences.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod format;
pub mod metrics;
pub mod motion_space;
pub mod nn;
pub mod objective;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor2;
