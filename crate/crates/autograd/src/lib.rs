//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is deliberately small: exactly what an FPN detector and its
//! distillation losses need. A [`Tape`] is single-threaded; independent tapes
//! may run on different threads.

pub mod codec;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use ops::BCE_EPS;
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::{Result, Tensor, TensorError};

/// `1 / (1 + e^(−x))`, evaluated without overflow.
pub fn sigmoid(x: f64) -> f64 {
    ops::elementwise::sigmoid(x)
}
