//! Recurrent diffusion tokenizer and recurrent token-prediction generator.
//!
//! The tokenizer mixes Gaussian noise into encoder latents over `T` steps
//! and quantizes each noisy residual against a learned codebook; the
//! generator learns to predict those per-step codes from the noise, the
//! class label, the step index and the accumulated quantized latent, and
//! replays the process from pure noise at sampling time.

pub mod container;
pub mod data;
pub mod error;
pub mod generator;
pub mod nn;
pub mod numerics;
pub mod quantizer;
pub mod schedule;

pub use error::{Error, Result};
