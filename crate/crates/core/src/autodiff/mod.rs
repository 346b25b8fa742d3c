//! Dense float64 tensors with tape-based reverse-mode differentiation.

mod graph;
mod gradcheck;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport, ParamReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
