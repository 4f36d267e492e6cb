//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! All operations read tensors as row-major matrices (see [`Tensor`]).
//! Build a [`Tape`] per forward pass, record operations on it, then call
//! [`Tape::backward`] on a scalar loss.

mod error;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, RELATIVE_FLOOR};
pub use scalar::Scalar;
pub use tape::{smoothed_target, softmax_in_place, Activation, Tape, Var};
pub use tensor::Tensor;
