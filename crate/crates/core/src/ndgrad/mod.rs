//! Dense 2-D tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{softmax_in_place, Elementwise, Tape, Var};
pub use tensor::{DType, Real, Tensor2};
