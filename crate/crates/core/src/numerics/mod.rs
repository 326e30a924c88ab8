//! Dense `f64` tensors, a reverse-mode autodiff tape, a finite-difference
//! gradient oracle, and the Adam update rule.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{finite_difference_gradient, gradient_mismatch};
pub use graph::{logsumexp, weighted_logsumexp, Graph, Var};
pub use tensor::Tensor;
