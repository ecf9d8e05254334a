//! Input generators shared by the criterion benches in `benches/`.

use rand_distr::{Distribution, StandardNormal};
use voxelforge::rng::seeded;
use voxelforge::DMatrix;

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeded(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// A target that is an exact combination of `k` dictionary columns.
pub fn planted_target(dictionary: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let step = (dictionary.ncols() / k.max(1)).max(1);
    (0..dictionary.nrows())
        .map(|r| (0..k).map(|j| (1.0 + j as f64) * dictionary[(r, (j * step) % dictionary.ncols())]).sum())
        .collect()
}

/// Measured responses and a noisy copy standing in for predictions.
pub fn response_pair(samples: usize, voxels: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let measured = gaussian_matrix(samples, voxels, seed);
    let noise = gaussian_matrix(samples, voxels, seed ^ 0x5eed);
    let predicted = &measured + noise * 2.0;
    (measured, predicted)
}
