//! The four subcommands, as library functions returning an exit code.

use std::path::Path;
use std::sync::atomic::AtomicBool;

use hgpclust_core::pipeline::{compare, fit, RaceConfig, RaceRun};
use hgpclust_core::synth::{generate, SyntheticSpec};
use hgpclust_core::Mode;
use serde::Serialize;

use crate::bundle::{self, create_dir, write_json, write_rows};
use crate::config::{mode_name, RunConfig};
use crate::csvio;
use crate::error::{exit, invalid, Result};
use crate::predict::{self, PredictMode, PredictRequest};

pub const SYNTH_DATA: &str = "data.csv";
pub const SYNTH_TRUTH: &str = "truth.csv";
pub const COMPARE_TABLE: &str = "compare.csv";
pub const COMPARE_TRACE: &str = "compare_trace.csv";
pub const COMPARE_SUMMARY: &str = "summary.json";

/// Writes the default synthetic benchmark for `seed` with its true labels.
pub fn synth(seed: u64, out: &Path) -> Result<u8> {
    let (data, truth) = generate(&SyntheticSpec::with_seed(seed))?;
    create_dir(out)?;
    csvio::write_dataset(&data, &out.join(SYNTH_DATA))?;
    write_rows(
        &out.join(SYNTH_TRUTH),
        &["series_id", "cluster"],
        data.names().iter().zip(&truth).map(|(n, c)| vec![n.clone(), c.to_string()]),
    )?;
    Ok(exit::SUCCESS)
}

/// Runs the full pipeline and writes a bundle. Returns
/// [`exit::NOT_CONVERGED`] when the final optimization stopped early or the
/// run was interrupted; the bundle is written either way.
pub fn run_fit(data: &Path, config: &Path, out: &Path, interrupt: Option<&AtomicBool>) -> Result<u8> {
    let config = RunConfig::load(config)?;
    let data = csvio::read_dataset(data)?;
    let fit_config = config.fit_config(data.design())?;
    let result = fit(&data, &fit_config, interrupt)?;
    bundle::write_fit(out, &data, &config, &result)?;
    Ok(if result.converged && !result.interrupted {
        exit::SUCCESS
    } else {
        exit::NOT_CONVERGED
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: String,
    pub runs: usize,
    pub median_iterations: f64,
    /// Runs that never reached the target count as infinitely slow.
    pub median_iterations_to_target: Option<f64>,
    pub reached_target: usize,
    pub converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub restarts: usize,
    pub target_slack: f64,
    pub modes: Vec<ModeSummary>,
}

/// Median of a sample, averaging the two middle values for even sizes.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn summarize(runs: &[RaceRun], restarts: usize, target_slack: f64, modes: &[Mode]) -> CompareSummary {
    let modes = modes
        .iter()
        .map(|&m| {
            let mine: Vec<&RaceRun> = runs.iter().filter(|r| r.mode == m).collect();
            let mut iters: Vec<f64> = mine.iter().map(|r| r.iterations as f64).collect();
            let mut to_target: Vec<f64> = mine
                .iter()
                .map(|r| r.iterations_to_target.map_or(f64::INFINITY, |i| i as f64))
                .collect();
            let med = median(&mut to_target);
            ModeSummary {
                mode: mode_name(m).into(),
                runs: mine.len(),
                median_iterations: median(&mut iters),
                median_iterations_to_target: med.is_finite().then_some(med),
                reached_target: mine.iter().filter(|r| r.iterations_to_target.is_some()).count(),
                converged: mine.iter().filter(|r| r.converged).count(),
            }
        })
        .collect();
    CompareSummary {
        restarts,
        target_slack,
        modes,
    }
}

/// Races the configured optimizer modes from shared starting points.
pub fn run_compare(data: &Path, config: &Path, restarts: Option<usize>, out: &Path) -> Result<u8> {
    let config = RunConfig::load(config)?;
    let data = csvio::read_dataset(data)?;
    let restarts = restarts.unwrap_or(config.restarts);
    if restarts == 0 {
        return Err(invalid("--restarts must be >= 1"));
    }
    let race = RaceConfig {
        fit: config.fit_config(data.design())?,
        restarts,
        target_slack: config.target_slack,
        modes: config.modes.clone(),
    };
    let runs = compare(&data, &race)?;
    create_dir(out)?;
    write_rows(
        &out.join(COMPARE_TABLE),
        &[
            "restart",
            "mode",
            "iterations",
            "iterations_to_target",
            "wall_time_s",
            "final_bound",
            "converged",
        ],
        runs.iter().map(|r| {
            vec![
                r.restart.to_string(),
                mode_name(r.mode).to_string(),
                r.iterations.to_string(),
                r.iterations_to_target.map_or(String::new(), |i| i.to_string()),
                r.wall_time.to_string(),
                r.final_bound.to_string(),
                r.converged.to_string(),
            ]
        }),
    )?;
    write_rows(
        &out.join(COMPARE_TRACE),
        &["restart", "mode", "iter", "bound", "step_kind", "wall_time_s"],
        runs.iter().flat_map(|r| {
            r.trace.iter().map(move |t| {
                vec![
                    r.restart.to_string(),
                    mode_name(r.mode).to_string(),
                    t.iter.to_string(),
                    t.bound.to_string(),
                    t.step_kind.as_str().to_string(),
                    t.wall_time.to_string(),
                ]
            })
        }),
    )?;
    write_json(
        &out.join(COMPARE_SUMMARY),
        &summarize(&runs, restarts, race.target_slack, &race.modes),
    )?;
    Ok(if runs.iter().all(|r| r.converged) {
        exit::SUCCESS
    } else {
        exit::NOT_CONVERGED
    })
}

/// Writes predictions to `out`, or to stdout when `out` is `None`.
pub fn run_predict(bundle_dir: &Path, mode: PredictMode, req: &PredictRequest, out: Option<&Path>) -> Result<u8> {
    let loaded = bundle::load(bundle_dir)?;
    let rows = predict::predict(&loaded, mode, req)?;
    match out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(crate::error::CliError::io(path))?;
            predict::emit(&rows, std::io::BufWriter::new(file))?;
        }
        None => predict::emit(&rows, std::io::stdout().lock())?,
    }
    Ok(exit::SUCCESS)
}
