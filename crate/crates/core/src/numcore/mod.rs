//! Double-precision tensors and a recording tape for reverse-mode gradients.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{softmax_rows, Tensor};
