//! Dense `f64` tensors with a reverse-mode tape.
//!
//! Every forward operation is a method on [`Tape`] that appends a node and
//! returns a [`Var`]. Storage is flat row-major with no views: reshape and
//! transpose copy. Broadcasting is limited to equal-rank operands whose
//! extents match or are 1, which covers bias rows and per-row statistics.

mod tape;
mod tensor;

pub mod gradcheck;

pub use tape::{Binary, Reduction, Tape, Unary, Var};
pub use tensor::Tensor;
