//! Dense row-major tensors and a reverse-mode tape.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] and addressed through copyable [`Var`] handles. Only the
//! broadcasting the transformer needs is supported: a bias row added to every
//! row of a matrix. Everything else is same-shape or explicit matrix algebra.

pub mod init;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
