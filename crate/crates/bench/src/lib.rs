//! Shared fixtures for the kernel benchmarks.

use std::sync::Arc;

use wppg_core::ot1d::{ActionGrid, GridDistribution};
use wppg_core::{Mat, Rng};

pub fn gaussian_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = Rng::new(seed);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape")
}

/// Smooth-ish random distribution on an `n`-point grid over `[-1, 1]`.
pub fn random_distribution(n: usize, seed: u64) -> GridDistribution {
    let grid = Arc::new(ActionGrid::uniform(n, -1.0, 1.0).expect("grid"));
    let mut rng = Rng::new(seed);
    let logits: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    GridDistribution::softmax(grid, &logits).expect("finite logits")
}

pub fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.normal()).collect()
}
