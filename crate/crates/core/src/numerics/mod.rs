//! Dense linear algebra, TopK, Adam, seeded randomness and the statistics
//! shared by every other module.
//!
//! Storage is `f32` by default with `f64` accumulation in every reduction.
//! All routines are sequential with a fixed reduction order, so results are
//! bit-reproducible.

mod adam;
mod matrix;
pub mod rng;
pub mod stats;
mod topk;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use matrix::{dot, Matrix, Real};
pub use rng::{Categorical, SplitMix64};
pub use stats::{bootstrap_median_ci, ks_distance, Ecdf, MedianCi};
pub use topk::{topk, topk_indices};
