//! Shared fixtures for the benchmarks.

use qexplain_core::workloadgen::{blob_dataset, generate, split};
use qexplain_core::{preprocess, AggregateKind, Dataset, ExplanationModel, Family, Hyperparams, Query, WorkloadSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Normalized, indexed blob dataset of `n` rows.
pub fn dataset(n: usize) -> Dataset {
    let (ds, _) = blob_dataset(n, 2, 5, 0.15, 1).unwrap().normalize().unwrap();
    ds.with_index()
}

/// COUNT model trained on a Gauss-Gauss workload, plus its held-out queries.
pub fn trained(ds: &Dataset, m: usize) -> (ExplanationModel, Vec<Query>) {
    let spec = WorkloadSpec::mixture(2, Family::GaussianMixture, Family::GaussianMixture, 5, 3, m, 1).unwrap();
    let w = generate(&spec, ds, AggregateKind::Count).unwrap();
    let (train, eval) = split(&w.queries, 0.2, 1).unwrap();
    let coords = ds.scaling().map_or_else(|| vec![(0.0, 1.0); 2], |s| s.coords.clone());
    let model = preprocess(&train, &Hyperparams::default(), coords, ds.norm()).unwrap();
    (model, eval)
}

pub fn uniform_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random()).collect()).collect()
}

/// Noisy samples of a three-knot piecewise-linear curve on `n` radii.
pub fn plr_samples(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=n)
        .map(|i| {
            let t = 0.2 * i as f64 / n as f64;
            let y = 0.1 + 15.0 * (t - 0.05).max(0.0) - 24.0 * (t - 0.1).max(0.0) + 18.0 * (t - 0.15).max(0.0);
            (t, y + rng.random_range(-0.01..0.01))
        })
        .collect()
}
