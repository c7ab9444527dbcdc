//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{Activation, AttentionMask, BatchStats, Gradients, Graph, ResizeAxis, Var};
pub use tensor::{gemm, Scalar, Tensor};
