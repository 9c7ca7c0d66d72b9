//! Desk-scale diffusion-transformer inference with adaptive latent caching,
//! mixed-precision quantization and redundancy-driven layer pruning.

pub mod error;
pub mod harness;
pub mod model;
pub mod quant;
pub mod sampler;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
