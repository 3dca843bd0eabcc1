//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! [`Tape`] records operations on [`Tensor`] values and propagates gradients
//! back to its leaves. [`gradcheck`] compares those gradients against central
//! finite differences.

pub mod checks;
mod error;
pub mod fault;
mod gradcheck;
mod io;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{gradcheck, gradcheck_many, relative_error, DEFAULT_STEP};
pub use io::{encoded_len, MAGIC};
pub use tape::{normal_cdf, sigmoid_scalar, OpKind, Tape, Var};
pub use tensor::{broadcast_shapes, numel, Tensor};
