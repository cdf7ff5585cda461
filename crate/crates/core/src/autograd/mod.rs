//! Dense `f64` tensors and a tape-based reverse-mode differentiator.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{analytic_grad, finite_diff_check};
pub use graph::{gelu, Activation, Graph, Var};
pub use tensor::Tensor;
