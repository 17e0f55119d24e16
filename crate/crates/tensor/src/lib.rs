//! Small dense tensor library with reverse-mode autodiff.
//!
//! Kernels are written once over [`Element`] and instantiated for `f32`
//! (training, inference) and `f64` (gradient checking). Everything runs on
//! the calling thread, so results are deterministic for a given input.

mod adam;
mod element;
mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, gradient_check_at, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Mode, Var};
pub use ops::{BatchNormStats, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
