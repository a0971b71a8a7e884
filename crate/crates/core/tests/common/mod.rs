#![allow(dead_code)]

use hgpclust_core::{Design, GroupedDataset, Hypers, KernelSpec, Layer, StructureSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sorted, well separated times in (0, 1).
pub fn random_times(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| (i as f64 + rng.random_range(0.2..0.8)) / d as f64)
        .collect()
}

pub fn random_hypers(rng: &mut ChaCha8Rng) -> Hypers {
    Hypers {
        cluster: KernelSpec::squared_exponential(rng.random_range(0.3..2.0), rng.random_range(0.2..1.5)),
        structure: StructureSpec::new(vec![
            Layer::group(KernelSpec::squared_exponential(
                rng.random_range(0.05..0.5),
                rng.random_range(0.2..1.5),
            )),
            Layer::group(KernelSpec::white_noise(rng.random_range(0.05..0.5))),
        ]),
    }
}

pub fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GroupedDataset {
    let times = random_times(rng, d);
    let groups = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let names = (0..n).map(|i| format!("g{i}")).collect();
    GroupedDataset::new(Design::flat(times), groups, names).unwrap()
}

pub fn random_gamma(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| rng.random_range(-scale..scale))
}

pub fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), k, |n, j| if labels[n] == j { 1.0 } else { 0.0 })
}
