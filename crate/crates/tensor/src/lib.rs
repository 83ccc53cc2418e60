//! Minimal dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Everything the pose models need lives here: a row-major [`Tensor`], a
//! [`Graph`] that records operations and replays them backwards, the
//! convolution / batch-norm / linear layers built on top of it, and the Adam
//! optimizer with a plateau learning-rate schedule.
//!
//! Training runs in `f32`. The `f64` instantiation exists so gradients can be
//! checked against central finite differences (see [`gradcheck`]).
//!
//! Intra-op parallelism (feature `parallel`, on by default) only partitions
//! output elements, so every reduction runs in a fixed order and results are
//! bit-identical regardless of the number of worker threads.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod parallel;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{sigmoid, softplus, BatchStats, CustomBackward, Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
