//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The operation set is the one needed by convolutional encoder/decoder
//! networks and dense displacement fields: broadcasting arithmetic,
//! reductions, 2-D convolution, pooling, resizing, softmax, instance
//! normalization and bilinear warping. Everything runs on the calling thread.

mod float;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod tensor;

pub use float::Float;
pub use tensor::{numel, Gradients, Tensor};
