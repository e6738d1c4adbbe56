//! Minimal dense-tensor library with tape-based reverse-mode
//! differentiation, an Adam optimizer, and the XMAR checkpoint container.
//!
//! Tensors are row-major and images are NHWC. There is no general
//! broadcasting: binary ops need equal shapes, and [`Tape::add_broadcast`]
//! covers bias-style adds.

mod adam;
pub mod checkpoint;
mod element;
mod error;
mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use element::Element;
pub use error::{Result, TensorError};
pub use tape::{Gradients, Padding, Reduce, Tape, Var};
pub use tensor::Tensor;
