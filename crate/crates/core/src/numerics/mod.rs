//! Dense tensors, a reverse-mode tape and a finite-difference oracle.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub(crate) use graph::inv_rms;
pub use graph::{softmax_lastdim, AttentionLayout, Gradients, Graph, Var};
pub(crate) use tensor::kernels;
pub use tensor::{Tensor, MASKED_LOGIT};
