//! Shared fixtures for the benchmarks.

use hvq_core::nn::seeded_rng;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

pub fn uniform_costs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    use rand::Rng;
    let mut rng = seeded_rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(0.0..1.0))
}
