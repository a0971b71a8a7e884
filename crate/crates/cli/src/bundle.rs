//! Result bundles: a directory holding everything a fit produced.
//!
//! | file | contents |
//! |---|---|
//! | `data.csv` | the input data in the ingest format |
//! | `allocations.csv` | `series_id` and one responsibility column per cluster |
//! | `labels.csv` | `series_id,cluster`, the row-wise argmax |
//! | `posteriors.csv` | `cluster,t,mean,sd` on an even grid over the data span |
//! | `trace.csv` | `iter,bound,step_kind,wall_time_s` |
//! | `moves.csv` | `round,kind,column,before_bound,after_bound,accepted` |
//! | `hyper_trace.csv` | `phase,step,name,value,bound` |
//! | `hypers.json` | fitted hyperparameters and concentration |
//! | `manifest.json` | configuration, sizes, bound breakdown, status |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hgpclust_core::hgp::LatentPosterior;
use hgpclust_core::pipeline::FitResult;
use hgpclust_core::{BoundBreakdown, GroupedDataset, Hypers};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::csvio;
use crate::error::{invalid, CliError, Result};

pub const DATA: &str = "data.csv";
pub const ALLOCATIONS: &str = "allocations.csv";
pub const LABELS: &str = "labels.csv";
pub const POSTERIORS: &str = "posteriors.csv";
pub const TRACE: &str = "trace.csv";
pub const MOVES: &str = "moves.csv";
pub const HYPER_TRACE: &str = "hyper_trace.csv";
pub const HYPERS: &str = "hypers.json";
pub const MANIFEST: &str = "manifest.json";

pub const FILES: [&str; 9] = [
    DATA,
    ALLOCATIONS,
    LABELS,
    POSTERIORS,
    TRACE,
    MOVES,
    HYPER_TRACE,
    HYPERS,
    MANIFEST,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypersFile {
    pub alpha: f64,
    pub hypers: Hypers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub n_groups: usize,
    pub dim: usize,
    pub clusters: usize,
    pub occupied_clusters: usize,
    pub bound: BoundBreakdown,
    pub converged: bool,
    pub interrupted: bool,
    /// Allowed extrapolation for `predict`, as a fraction of the time span.
    pub margin: f64,
    pub files: Vec<String>,
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub(crate) fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    let fail = |e: csv::Error| invalid(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>()).map_err(fail)?;
    }
    w.flush().map_err(CliError::io(path))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| invalid(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(CliError::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// `n` evenly spaced points from `a` to `b`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// One posterior per column of `phi`, built from the weighted sums of the data.
pub fn cluster_posteriors<'a>(
    data: &'a GroupedDataset,
    hypers: &'a Hypers,
    phi: &DMatrix<f64>,
) -> Result<Vec<LatentPosterior<'a>>> {
    let ky = hypers.structure.matrix(data.design());
    let sums = data.values() * phi;
    (0..phi.ncols())
        .map(|k| {
            let sum: DVector<f64> = sums.column(k).into_owned();
            Ok(LatentPosterior::new(
                &hypers.cluster,
                &ky,
                &data.design().times,
                &sum,
                phi.column(k).sum(),
            )?)
        })
        .collect()
}

/// Writes the full bundle for `result` into `dir`.
pub fn write_fit(dir: &Path, data: &GroupedDataset, config: &RunConfig, result: &FitResult) -> Result<()> {
    create_dir(dir)?;
    csvio::write_dataset(data, &dir.join(DATA))?;
    let phi = result.resp.phi();
    let k = phi.ncols();

    let mut header = vec!["series_id".to_string()];
    header.extend((0..k).map(|j| format!("cluster_{j}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        &dir.join(ALLOCATIONS),
        &header_refs,
        data.names().iter().enumerate().map(|(n, name)| {
            std::iter::once(name.clone()).chain(phi.row(n).iter().map(|v| v.to_string())).collect::<Vec<_>>()
        }),
    )?;
    let labels = result.labels();
    write_rows(
        &dir.join(LABELS),
        &["series_id", "cluster"],
        data.names().iter().zip(&labels).map(|(n, l)| vec![n.clone(), l.to_string()]),
    )?;

    let times = &data.design().times;
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid = linspace(lo, hi, config.grid_points);
    let mut rows = Vec::new();
    for (j, post) in cluster_posteriors(data, &result.hypers, phi)?.iter().enumerate() {
        let (mean, cov) = post.on_grid(&grid);
        for (i, t) in grid.iter().enumerate() {
            rows.push(vec![
                j.to_string(),
                t.to_string(),
                mean[i].to_string(),
                cov[(i, i)].max(0.0).sqrt().to_string(),
            ]);
        }
    }
    write_rows(&dir.join(POSTERIORS), &["cluster", "t", "mean", "sd"], rows)?;

    write_rows(
        &dir.join(TRACE),
        &["iter", "bound", "step_kind", "wall_time_s"],
        result.trace.iter().map(|r| {
            vec![
                r.iter.to_string(),
                r.bound.to_string(),
                r.step_kind.as_str().to_string(),
                r.wall_time.to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join(MOVES),
        &["round", "kind", "column", "before_bound", "after_bound", "accepted"],
        result.moves.iter().map(|m| {
            let p = &m.proposal;
            vec![
                m.round.to_string(),
                p.kind.name().to_string(),
                p.kind.column().map_or(String::new(), |c| c.to_string()),
                p.before_bound.to_string(),
                p.after_bound.to_string(),
                p.accepted.to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join(HYPER_TRACE),
        &["phase", "step", "name", "value", "bound"],
        result.hyper_trace.iter().map(|h| {
            vec![
                h.phase.to_string(),
                h.step.to_string(),
                h.name.clone(),
                h.value.to_string(),
                h.bound.to_string(),
            ]
        }),
    )?;
    write_json(
        &dir.join(HYPERS),
        &HypersFile {
            alpha: result.alpha,
            hypers: result.hypers.clone(),
        },
    )?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.entries.clone(),
        seed: config.fit.seed,
        n_groups: data.n_groups(),
        dim: data.dim(),
        clusters: k,
        occupied_clusters: result.occupied_clusters(),
        bound: result.breakdown,
        converged: result.converged,
        interrupted: result.interrupted,
        margin: config.margin,
        files: FILES.iter().map(|f| f.to_string()).collect(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// What `predict` needs from a bundle.
pub struct LoadedBundle {
    pub dir: PathBuf,
    pub data: GroupedDataset,
    pub hypers: HypersFile,
    pub phi: DMatrix<f64>,
    pub manifest: Manifest,
}

pub fn load(dir: &Path) -> Result<LoadedBundle> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let hypers: HypersFile = read_json(&dir.join(HYPERS))?;
    let data = csvio::read_dataset(&dir.join(DATA))?;
    hypers.hypers.validate(data.design())?;

    let path = dir.join(ALLOCATIONS);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if rec.get(0) != Some(data.names()[i.min(data.n_groups() - 1)].as_str()) {
            return Err(invalid(format!("{}: row {} does not match the data", path.display(), i + 2)));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| invalid(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        rows.push(row);
    }
    if rows.len() != data.n_groups() || rows.iter().any(|r| r.len() != manifest.clusters) {
        return Err(invalid(format!("{}: shape does not match the manifest", path.display())));
    }
    let phi = DMatrix::from_fn(rows.len(), manifest.clusters, |n, k| rows[n][k]);
    Ok(LoadedBundle {
        dir: dir.to_path_buf(),
        data,
        hypers,
        phi,
        manifest,
    })
}
