//! The diffusion-based image tokenizer.
//!
//! An image is encoded to a layer-normalized latent `z_1`. At each step
//! `t` the current residual is mixed with Gaussian noise,
//! `v_t = alpha_t z_t + beta_t eps_t`, snapped to its nearest codebook row,
//! optionally refined by a shared bias convolution to give `v'_t`, and
//! subtracted from the residual while being added to the accumulated latent
//! `z'_t`. The decoder maps `z'_T` back to pixels.

mod codebook;
mod loss;
mod model;
mod train;

pub use codebook::{quantize, Codebook};
pub use loss::{step_weights, tokenizer_loss, tokenizer_objective, LossComponents, LossWeights, TokenizerObjective};
pub use model::{Rollout, TokenizationRecord, TokenizerConfig, TokenizerModel};
pub use train::{image_batch, train_tokenizer, TokenizerEpoch, TokenizerTrainConfig};
