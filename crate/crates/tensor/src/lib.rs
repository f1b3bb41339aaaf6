//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Graph`] tape and replayed backwards by [`Graph::backward`]. The op set is
//! exactly what a small U-Net encoder plus point-wise MLP heads need: 2D
//! convolution, pooling, nearest upsampling, channel concatenation, affine
//! layers, bilinear feature sampling, axis reductions and an MSE loss.
//!
//! Everything is generic over [`Scalar`] so that the same model code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.

mod checkpoint;
mod conv;
mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod sample;
mod scalar;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use optim::Sgd;
pub use scalar::Scalar;
pub use tensor::Tensor;
