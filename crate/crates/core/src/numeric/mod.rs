//! Dense `f64` tensors, reverse-mode differentiation and a finite-difference
//! gradient oracle.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_STEP, MAGNITUDE_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
