//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The engine is deliberately small: every operation used by the shapegene
//! networks (convolution, transposed convolution, instance normalization,
//! pointwise activations, reductions and a handful of shape helpers) records a
//! closure computing its vector-Jacobian product. [`Tensor::backward`] walks the
//! recorded graph once in reverse topological order.
//!
//! All kernels are single-threaded and run in a fixed order, so a forward or
//! backward pass is bit-reproducible for identical inputs.

mod conv;
mod error;
mod nn;
mod norm;
mod ops;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use conv::ConvSpec;
pub use error::{Result, TensorError};
pub use optim::{Adam, AdamMoments, AdamSettings};
pub use param::{Module, Param};
pub use scalar::Scalar;
pub use nn::softmax_rows;
pub use tensor::{Grads, NodeId, Tensor};
