//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! Every backward rule is written in terms of differentiable ops, so a
//! gradient computed with `create_graph = true` can be differentiated again.
//! That is what second-order meta-learning needs; first-order training just
//! runs backward with recording switched off.

mod conv;
mod float;
mod grad;
pub mod numeric;
pub mod optim;
mod tensor;
mod var;

pub use float::{DType, Float};
pub use grad::{grad, grad_with_seed};
pub use optim::{sgd_step, Adam};
pub use tensor::Tensor;
pub use var::{broadcast_shape, is_grad_enabled, no_grad, with_grad_mode, Var};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    Length { shape: Vec<usize>, len: usize },
}
