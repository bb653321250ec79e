//! Strided tensors and a tape-based reverse-mode autodiff engine.

pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use element::{gemm, Element, MatRef};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_coords, relative_error};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::{split_at_axis, ReduceKind, Tensor};
