//! Few-shot GAN adaptation: a pretrained source generator/discriminator pair is
//! fine-tuned on a handful of target images with randomly masked image-level
//! discrimination, patch-level discrimination, and KL-based cross-domain
//! consistency losses on both networks.

pub mod adversarial;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod data;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
