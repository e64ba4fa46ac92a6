//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records each primitive as it is evaluated; [`Tape::backward`]
//! replays it in reverse. There is no broadcasting beyond the bias add in
//! [`Tape::dense`]: shapes must match exactly.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_coords, FdReport};
pub use tape::{Gradients, Tape, Value};
pub use tensor::Tensor;
