//! Minimal dense-tensor core with reverse-mode automatic differentiation.
//!
//! Ops are recorded on a [`Graph`] as they run (define-by-run) and a single
//! reverse sweep fills gradients for every leaf that asked for one. The
//! element type is generic: `f32` for training, `f64` for verification.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, CosineSchedule};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
