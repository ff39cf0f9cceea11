//! Tensor autograd, image filters, and the model zoo / training stack for
//! grayscale expression recognition.
//!
//! Layout convention is NHWC (channels last) throughout. All randomness goes
//! through seeded ChaCha8 streams and every kernel is deterministic across
//! thread counts, so a fixed config reproduces results bit-for-bit.

#![forbid(unsafe_code)]

pub mod data;
pub mod error;
pub mod filters;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod stl;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tape::{Gradients, Op, Padding, Tape, TensorId};
pub use tensor::{Element, Tensor};
