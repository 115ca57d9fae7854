//! Desk-scale latent-diffusion image restoration.
//!
//! The crate carries its own small numeric stack: a tape-based autograd over
//! dense `f64` tensors, a convolutional encoder/denoiser/decoder with a
//! zero-initialized control branch, DDPM forward and reverse processes,
//! positive/negative prompt guidance, low-rank adapters with merge support,
//! AdamW training, synthetic data with degradation recipes, and full-reference
//! quality metrics.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod guidance;
pub mod image;
pub mod lora;
pub mod metrics;
pub mod net;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use exec::Parallelism;
pub use image::Image;
pub use net::{NetConfig, NetParams};
pub use prompt::PromptId;
pub use rng::SeedStream;
pub use tensor::Tensor;
