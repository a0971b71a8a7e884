//! End-to-end fitting and the steepest-versus-conjugate race.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bound::{BoundBreakdown, ClusterPosterior, Objective, Responsibilities};
use crate::error::{Error, Result};
use crate::hgp::{GroupedDataset, Hypers};
use crate::hypers::{init_hypers, optimize_hypers, HyperSchedule, HyperStep};
use crate::moves::{self, MoveProposal, DEFAULT_PRUNE_THRESHOLD};
use crate::optimizer::{optimize, Mode, OptimizeReport, OptimizerConfig, TraceRecord};

/// Standard deviation of the initial `gamma` entries.
pub const INIT_GAMMA_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Kernel kinds and layout; parameter values are used as given unless
    /// `init_heuristics` is set.
    pub hypers: Hypers,
    pub init_heuristics: bool,
    /// If set, every free log-parameter is shifted by `N(0, sd^2)` after
    /// initialization.
    pub hyper_perturbation: Option<f64>,
    pub alpha: f64,
    pub k_init: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: HyperSchedule,
    pub seed: u64,
    /// Maximum move rounds per phase; a phase stops early after a round
    /// with no accepted split. Zero disables moves.
    pub move_rounds: usize,
    pub prune_threshold: f64,
}

impl FitConfig {
    pub fn new(hypers: Hypers) -> Self {
        FitConfig {
            hypers,
            init_heuristics: true,
            hyper_perturbation: None,
            alpha: 1.0,
            k_init: 10,
            optimizer: OptimizerConfig::default(),
            schedule: HyperSchedule::default(),
            seed: 0,
            move_rounds: 4,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha = {} must be > 0", self.alpha)));
        }
        if self.k_init == 0 {
            return Err(Error::InvalidArgument("k_init must be >= 1".into()));
        }
        if !(self.prune_threshold >= 0.0) {
            return Err(Error::InvalidArgument("prune_threshold must be >= 0".into()));
        }
        if let Some(sd) = self.hyper_perturbation {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(Error::InvalidArgument(format!("hyper perturbation {sd} must be >= 0")));
            }
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

/// A move together with the round it belongs to (counted over the whole
/// fit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub round: usize,
    pub proposal: MoveProposal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperRecord {
    pub phase: usize,
    pub step: usize,
    pub name: String,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub resp: Responsibilities,
    pub hypers: Hypers,
    pub alpha: f64,
    pub breakdown: BoundBreakdown,
    pub posteriors: Vec<ClusterPosterior>,
    pub trace: Vec<TraceRecord>,
    pub moves: Vec<MoveRecord>,
    pub hyper_trace: Vec<HyperRecord>,
    /// The final variational run met the tolerance.
    pub converged: bool,
    pub interrupted: bool,
}

impl FitResult {
    pub fn labels(&self) -> Vec<usize> {
        crate::synth::hard_labels(self.resp.phi())
    }

    /// Number of clusters holding at least one group after hard assignment.
    pub fn occupied_clusters(&self) -> usize {
        let mut seen = vec![false; self.resp.k()];
        for l in self.labels() {
            seen[l] = true;
        }
        seen.into_iter().filter(|&s| s).count()
    }
}

/// `N x K` matrix of `N(0, INIT_GAMMA_SD^2)` draws.
pub fn initial_gamma(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, INIT_GAMMA_SD).expect("valid sd");
    // Fill row by row so that the draw order does not depend on storage.
    let mut out = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            out[(i, j)] = normal.sample(rng);
        }
    }
    out
}

/// Hyperparameters a fit starts from: the template, optionally the
/// heuristics, optionally perturbed in log space.
pub fn starting_hypers(data: &GroupedDataset, config: &FitConfig, rng: &mut ChaCha8Rng) -> Result<Hypers> {
    let mut h = if config.init_heuristics {
        init_hypers(data, &config.hypers)?
    } else {
        config.hypers.clone()
    };
    if let Some(sd) = config.hyper_perturbation {
        let normal = Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let theta: Vec<f64> = h.free_log_params().into_iter().map(|t| t + normal.sample(rng)).collect();
        h = h.with_free_log_params(&theta);
    }
    h.validate(data.design())?;
    Ok(h)
}

fn interrupted(flag: Option<&AtomicBool>) -> bool {
    flag.is_some_and(|f| f.load(Ordering::SeqCst))
}

fn append_trace(trace: &mut Vec<TraceRecord>, report: &OptimizeReport, offset_time: f64) {
    let base = trace.len();
    trace.extend(report.trace.iter().map(|r| TraceRecord {
        iter: base + r.iter,
        wall_time: offset_time + r.wall_time,
        ..*r
    }));
}

fn record_hypers(out: &mut Vec<HyperRecord>, phase: usize, steps: &[HyperStep]) {
    for s in steps {
        for (name, value) in &s.params {
            out.push(HyperRecord {
                phase,
                step: s.step,
                name: name.clone(),
                value: *value,
                bound: s.bound,
            });
        }
    }
}

/// Runs the full schedule: starting hyperparameters, then `phases` times
/// (variational optimization, hyperparameter ascent, move rounds). Closing
/// cycles of variational optimization, hyperparameter ascent and one move
/// round follow until no split is accepted (at most `move_rounds` moves),
/// then a final variational optimization. If `interrupt` becomes true the fit stops
/// at the next stage boundary and returns what it has.
pub fn fit(data: &GroupedDataset, config: &FitConfig, interrupt: Option<&AtomicBool>) -> Result<FitResult> {
    config.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hypers = starting_hypers(data, config, &mut rng)?;
    let mut resp = Responsibilities::from_gamma(initial_gamma(data.n_groups(), config.k_init, &mut rng));
    let mut objective = Objective::new(data, hypers, config.alpha)?;

    let vb = OptimizerConfig {
        max_iters: config.optimizer.max_iters.min(config.schedule.vb_iters_per_phase),
        ..config.optimizer
    };
    let mut trace = Vec::new();
    let mut move_log = Vec::new();
    let mut hyper_trace = Vec::new();
    let mut round = 0;
    let mut stopped = false;

    'phases: for phase in 1..=config.schedule.phases {
        let t0 = start.elapsed().as_secs_f64();
        let report = optimize(&objective, &mut resp, &vb)?;
        append_trace(&mut trace, &report, t0);
        if interrupted(interrupt) {
            stopped = true;
            break;
        }
        let outcome = optimize_hypers(objective, &resp, config.schedule.hyper_steps_per_phase)?;
        objective = outcome.objective;
        record_hypers(&mut hyper_trace, phase, &outcome.trajectory);
        for _ in 0..config.move_rounds {
            if interrupted(interrupt) {
                stopped = true;
                break 'phases;
            }
            round += 1;
            let log = moves::move_round(&objective, &mut resp, &vb, config.prune_threshold)?;
            let split_accepted = log
                .iter()
                .any(|p| p.accepted && matches!(p.kind, moves::MoveKind::Split(_)));
            move_log.extend(log.into_iter().map(|proposal| MoveRecord { round, proposal }));
            if !split_accepted {
                break;
            }
        }
    }

    // Moves change the allocation after the last hyperparameter update, so
    // both are refreshed until a round of moves leaves the partition alone.
    let mut converged = false;
    let mut last = None;
    let mut polish = 0;
    while !stopped && !interrupted(interrupt) {
        polish += 1;
        let t0 = start.elapsed().as_secs_f64();
        let report = optimize(&objective, &mut resp, &vb)?;
        append_trace(&mut trace, &report, t0);
        let outcome = optimize_hypers(objective, &resp, config.schedule.hyper_steps_per_phase)?;
        objective = outcome.objective;
        record_hypers(&mut hyper_trace, config.schedule.phases + polish, &outcome.trajectory);
        if polish > config.move_rounds || interrupted(interrupt) {
            break;
        }
        round += 1;
        let log = moves::move_round(&objective, &mut resp, &vb, config.prune_threshold)?;
        let split_accepted = log
            .iter()
            .any(|p| p.accepted && matches!(p.kind, moves::MoveKind::Split(_)));
        move_log.extend(log.into_iter().map(|proposal| MoveRecord { round, proposal }));
        if !split_accepted {
            break;
        }
    }
    if !stopped && !interrupted(interrupt) {
        let t0 = start.elapsed().as_secs_f64();
        let report = optimize(&objective, &mut resp, &config.optimizer)?;
        append_trace(&mut trace, &report, t0);
        converged = report.converged;
        last = Some(report.last);
    }
    let breakdown = match last {
        Some(b) => b,
        None => objective.bound(&resp)?,
    };
    let (_, posteriors) = objective.data_term(resp.phi())?;
    Ok(FitResult {
        hypers: objective.hypers().clone(),
        alpha: config.alpha,
        resp,
        breakdown,
        posteriors,
        trace,
        moves: move_log,
        hyper_trace,
        converged,
        interrupted: stopped || interrupted(interrupt),
    })
}

/// One mode's run in a race.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceRun {
    pub restart: usize,
    pub mode: Mode,
    pub iterations: usize,
    pub wall_time: f64,
    pub final_bound: f64,
    /// Iterations until the bound first reached the restart's target, or
    /// `None` if it never did.
    pub iterations_to_target: Option<usize>,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
}

/// Race configuration: fixed hyperparameters, no moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceConfig {
    pub fit: FitConfig,
    pub restarts: usize,
    /// Target for restart `r` is the steepest run's final bound minus this.
    pub target_slack: f64,
    /// Modes to race; normally `[Steepest, Conjugate]`.
    pub modes: Vec<Mode>,
}

/// For each restart, every mode starts from the same `gamma` (drawn from
/// `seed + restart`) with the same starting hyperparameters, which stay
/// fixed. Targets are the steepest run's final bound minus `target_slack`
/// (or the first mode's, if steepest is not raced).
pub fn compare(data: &GroupedDataset, config: &RaceConfig) -> Result<Vec<RaceRun>> {
    config.fit.validate()?;
    if config.restarts == 0 || config.modes.is_empty() {
        return Err(Error::InvalidArgument("need at least one restart and one mode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.fit.seed);
    let hypers = starting_hypers(data, &config.fit, &mut rng)?;
    let objective = Objective::new(data, hypers, config.fit.alpha)?;
    let reference = config
        .modes
        .iter()
        .position(|&m| m == Mode::Steepest)
        .unwrap_or(0);
    let mut out = Vec::new();
    for restart in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.fit.seed.wrapping_add(restart as u64));
        let gamma = initial_gamma(data.n_groups(), config.fit.k_init, &mut rng);
        let mut runs = Vec::new();
        for &mode in &config.modes {
            let mut resp = Responsibilities::from_gamma(gamma.clone());
            let cfg = OptimizerConfig {
                mode,
                ..config.fit.optimizer
            };
            let report = optimize(&objective, &mut resp, &cfg)?;
            runs.push((mode, report));
        }
        let target = runs[reference].1.last.total - config.target_slack;
        for (mode, report) in runs {
            out.push(RaceRun {
                restart,
                mode,
                iterations: report.iterations(),
                wall_time: report.trace.last().map_or(0.0, |r| r.wall_time),
                final_bound: report.last.total,
                iterations_to_target: report.iterations_to_reach(target),
                converged: report.converged,
                trace: report.trace,
            });
        }
    }
    Ok(out)
}
