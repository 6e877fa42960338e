//! Tensor substrate: autodiff engine, random streams, gradient checking.

mod gradcheck;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, relative_error, CoordCheck, GradCheck, GradCheckReport, REL_FLOOR};
pub use rng::{derive_seed, Rng};
pub use tensor::Tensor;
