//! The recurrent token predictor.
//!
//! A transformer `f(eps_t, y, t, z'_{t-1})` reads the step noise and the
//! accumulated quantized latent token by token, is conditioned on the
//! class and step through AdaLN-Zero modulation, and emits `K` logits per
//! token. Training uses teacher forcing on tokenizer records; sampling
//! replays the `T` steps from pure noise with classifier-free guidance and
//! Gumbel-max sampling.

mod model;
mod sampling;
mod train;

pub use model::{GeneratorConfig, GeneratorModel, Geometry, StepPredictor};
pub use sampling::{cfg_combine, generate, generate_codes, sample_codes, SamplerConfig};
pub use train::{
    drop_labels, examples_from_records, generator_loss, step_accuracy, train_generator, GeneratorEpoch,
    GeneratorTrainConfig, StepBatch, TrainedGenerator, TrainingExample,
};
