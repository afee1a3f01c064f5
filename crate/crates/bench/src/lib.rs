//! Benchmark fixtures.

use srlab_core::numerics::{Matrix, SplitMix64};

/// `rows x cols` matrix of standard normal draws.
pub fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.normal() as f32)
}

/// Half-rectified normal sample, zero-heavy like real latent activations.
pub fn activation_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.normal().max(0.0)).collect()
}
