//! Posterior predictions from a saved bundle.
//!
//! Output columns are `cluster,series_id,t,mean,sd,lower,upper`, where the
//! band is `mean +/- 2 sd` and `series_id` is empty outside
//! `existing-group` mode.

use std::io::Write;
use std::str::FromStr;

use hgpclust_core::hgp::{predict_group, predict_new_group};
use hgpclust_core::synth::hard_labels;
use nalgebra::{DMatrix, DVector};

use crate::bundle::{cluster_posteriors, linspace, LoadedBundle};
use crate::error::{invalid, Result};

pub const HEADER: [&str; 7] = ["cluster", "series_id", "t", "mean", "sd", "lower", "upper"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// The shared latent function of each cluster.
    ClusterMean,
    /// The function of an observed series, conditioned on its own data.
    ExistingGroup,
    /// The function of a hypothetical extra series in each cluster.
    NewGroup,
}

impl FromStr for PredictMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cluster-mean" => Ok(PredictMode::ClusterMean),
            "existing-group" => Ok(PredictMode::ExistingGroup),
            "new-group" => Ok(PredictMode::NewGroup),
            _ => Err(format!("unknown mode `{s}` (cluster-mean, existing-group or new-group)")),
        }
    }
}

/// Parses `start:stop:num`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
    let bad = || invalid(format!("grid `{spec}` is not `start:stop:num`"));
    let [a, b, n] = parts.as_slice() else {
        return Err(bad());
    };
    let a: f64 = a.parse().map_err(|_| bad())?;
    let b: f64 = b.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    if !a.is_finite() || !b.is_finite() || n == 0 || (n > 1 && b < a) {
        return Err(bad());
    }
    Ok(linspace(a, b, n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictRow {
    pub cluster: usize,
    pub series_id: Option<String>,
    pub t: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PredictRequest {
    pub grid: Vec<f64>,
    pub cluster: Option<usize>,
    pub group: Option<String>,
}

fn check_grid(bundle: &LoadedBundle, grid: &[f64]) -> Result<()> {
    let times = &bundle.data.design().times;
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = bundle.manifest.margin * (hi - lo);
    let (min, max) = (lo - pad, hi + pad);
    if let Some(t) = grid.iter().find(|&&t| t < min || t > max) {
        return Err(invalid(format!(
            "grid point {t} lies outside the allowed range [{min}, {max}]"
        )));
    }
    Ok(())
}

fn push(rows: &mut Vec<PredictRow>, cluster: usize, series: Option<&str>, grid: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) {
    for (i, &t) in grid.iter().enumerate() {
        rows.push(PredictRow {
            cluster,
            series_id: series.map(str::to_string),
            t,
            mean: mean[i],
            sd: cov[(i, i)].max(0.0).sqrt(),
        });
    }
}

pub fn predict(bundle: &LoadedBundle, mode: PredictMode, req: &PredictRequest) -> Result<Vec<PredictRow>> {
    check_grid(bundle, &req.grid)?;
    let k = bundle.phi.ncols();
    if let Some(c) = req.cluster.filter(|&c| c >= k) {
        return Err(invalid(format!("unknown cluster {c}; the bundle has clusters 0..{}", k - 1)));
    }
    let data = &bundle.data;
    let hypers = &bundle.hypers.hypers;
    let posts = cluster_posteriors(data, hypers, &bundle.phi)?;
    let grid = &req.grid;
    let mut rows = Vec::new();
    match mode {
        PredictMode::ClusterMean | PredictMode::NewGroup => {
            if req.group.is_some() {
                return Err(invalid("--group only applies to existing-group mode"));
            }
            for (j, post) in posts.iter().enumerate() {
                if req.cluster.is_some_and(|c| c != j) {
                    continue;
                }
                let (mean, cov) = if mode == PredictMode::ClusterMean {
                    post.on_grid(grid)
                } else {
                    predict_new_group(post, &hypers.structure, grid)
                };
                push(&mut rows, j, None, grid, &mean, &cov);
            }
        }
        PredictMode::ExistingGroup => {
            let labels = hard_labels(&bundle.phi);
            let members: Vec<usize> = match &req.group {
                Some(g) => {
                    let n = data
                        .names()
                        .iter()
                        .position(|s| s == g)
                        .ok_or_else(|| invalid(format!("unknown series `{g}`")))?;
                    vec![n]
                }
                None => (0..data.n_groups()).collect(),
            };
            for n in members {
                let c = req.cluster.unwrap_or(labels[n]);
                let (mean, cov) = predict_group(&posts[c], &hypers.structure, data.design(), &data.group(n), grid)?;
                push(&mut rows, c, Some(&data.names()[n]), grid, &mean, &cov);
            }
        }
    }
    Ok(rows)
}

pub fn emit<W: Write>(rows: &[PredictRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fail = |e: csv::Error| invalid(format!("cannot write CSV: {e}"));
    w.write_record(HEADER).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.cluster.to_string(),
            r.series_id.clone().unwrap_or_default(),
            r.t.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
            (r.mean - 2.0 * r.sd).to_string(),
            (r.mean + 2.0 * r.sd).to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| invalid(format!("cannot write CSV: {e}")))
}
