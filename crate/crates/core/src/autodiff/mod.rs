//! A small reverse-mode differentiation engine over 4-d tensors, with just the
//! operators the segmentation network needs.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{
    sigmoid, softmax_channels, Gradients, Graph, Mode, Var, BN_EPS, BN_MOMENTUM, LOG_CLAMP,
};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
