//! Shared fixtures for the criterion benches.

use ndarray::Array2;
use pdl_core::clustering::{pairwise_euclidean, DistanceMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n x d` matrix of unit-norm random rows.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    for mut r in m.rows_mut() {
        let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= s);
    }
    m
}

pub fn euclidean_fixture(n: usize, d: usize, seed: u64) -> DistanceMatrix {
    pairwise_euclidean(unit_rows(n, d, seed).view()).expect("finite fixture")
}
