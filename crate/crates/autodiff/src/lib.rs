//! Dense float64 tensors and a tape for reverse-mode differentiation.
//!
//! Every forward op records its output on a [`Tape`]; [`Tape::backward`]
//! replays the tape once in reverse. There is no implicit broadcasting:
//! shapes must match exactly unless [`Tape::broadcast_to`] is used.

pub mod check;
mod error;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var, SAFE_NORM_FLOOR};
pub use tensor::Tensor;
