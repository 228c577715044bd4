//! Minimal dense-array math and reverse-mode gradients for a fixed
//! encoder–decoder segmentation graph.
//!
//! All values are `f64`. Every operation checks its output for NaN/Inf and
//! reports the offending operation instead of propagating it.

mod error;
mod grid;
mod kernels;
mod tape;

pub use error::{DiffError, Result};
pub use grid::Grid;
pub use kernels::{combine_atoms, RunningStats};
pub use tape::{cosine_distance, BnMode, Gradients, ParamId, Tape, Var};

/// Batch-norm epsilon used throughout.
pub const BN_EPS: f64 = 1e-5;
