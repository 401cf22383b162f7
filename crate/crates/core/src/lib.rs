//! Feature-richness-score knowledge distillation for a small FPN detector.
//!
//! A frozen teacher's per-site maximum class probability weights how closely
//! a student imitates the teacher's FPN features and classification outputs.

pub mod analysis;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod frs;
pub mod gradcheck;
pub mod pnm;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
