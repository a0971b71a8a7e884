//! Synthetic grouped time series and clustering-agreement metrics.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hgp::{Design, GroupedDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_clusters: usize,
    pub n_times: usize,
    /// Inclusive range for the number of groups per cluster.
    pub per_cluster_range: (usize, usize),
    /// Amplitude of each group's sine offset from its cluster mean.
    pub offset_scale: f64,
    /// Range of the offset frequency, in cycles per unit time.
    pub offset_cycles: (f64, f64),
    pub noise_sd: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            n_clusters: 10,
            n_times: 12,
            per_cluster_range: (20, 30),
            offset_scale: 0.3,
            offset_cycles: (0.25, 0.75),
            noise_sd: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn with_seed(seed: u64) -> Self {
        SyntheticSpec {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.per_cluster_range;
        if self.n_clusters == 0 || self.n_times == 0 || lo == 0 || lo > hi {
            return Err(Error::InvalidArgument(format!("invalid synthetic counts: {self:?}")));
        }
        if !(self.noise_sd >= 0.0) || !(self.offset_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_sd and offset_scale must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Frequency `2 pi (1 + U(-0.25, 0.25))` and phase `U(0, 2 pi)`.
fn random_sine(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let omega = 2.0 * PI * (1.0 + rng.random_range(-0.25..0.25));
    let phase = rng.random_range(0.0..2.0 * PI);
    (omega, phase)
}

/// Draws a dataset and its true cluster labels. Times are `U(0, 1)`
/// (sorted) and shared by all groups. Cluster `k` has mean
/// `sin(omega_k t + psi_k)`; each of its groups adds
/// `offset_scale * sin(omega t + psi)` with its own random frequency and
/// phase, plus Gaussian noise.
pub fn generate(spec: &SyntheticSpec) -> Result<(GroupedDataset, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut times: Vec<f64> = (0..spec.n_times).map(|_| rng.random_range(0.0..1.0)).collect();
    times.sort_by(f64::total_cmp);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (lo, hi) = spec.per_cluster_range;

    let mut groups = Vec::new();
    let mut labels = Vec::new();
    for k in 0..spec.n_clusters {
        let (omega, phase) = random_sine(&mut rng);
        let members = rng.random_range(lo..=hi);
        for _ in 0..members {
            let w = 2.0 * PI * rng.random_range(spec.offset_cycles.0..=spec.offset_cycles.1);
            let p = rng.random_range(0.0..2.0 * PI);
            let series = times
                .iter()
                .map(|&t| {
                    (omega * t + phase).sin() + spec.offset_scale * (w * t + p).sin() + noise.sample(&mut rng)
                })
                .collect();
            groups.push(series);
            labels.push(k);
        }
    }
    let names = (0..groups.len()).map(|i| format!("series_{i:04}")).collect();
    let data = GroupedDataset::new(Design::flat(times), groups, names)?;
    Ok((data, labels))
}

/// Row-wise argmax; ties go to the lowest index.
pub fn hard_labels(phi: &DMatrix<f64>) -> Vec<usize> {
    phi.row_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items. Two
/// labelings that are both a single cluster (or both all singletons) score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "labelings have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
