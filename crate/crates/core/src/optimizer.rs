//! Natural-gradient ascent of the collapsed bound in softmax coordinates.
//!
//! The Fisher information of `q(z_n)` in `gamma_n` is
//! `diag(phi_n) - phi_n phi_n'`, which is singular. Dropping one coordinate,
//! inverting with Sherman-Morrison and mapping back shows that the natural
//! gradient is the Euclidean gradient divided elementwise by `phi`, which
//! simplifies to
//!
//! ```text
//! nat_nk = dL/dphi_nk - sum_j phi_nj dL/dphi_nj
//! ```
//!
//! A unit step along it is exactly one round of mean-field VBEM (see
//! [`meanfield`]); conjugate directions use Hestenes-Stiefel on top of it.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bound::{BoundBreakdown, Objective, Responsibilities};
use crate::error::{Error, Result};

pub mod meanfield;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Unit natural-gradient steps only (equivalent to VBEM).
    Steepest,
    /// Hestenes-Stiefel directions with fallback to unit natural steps.
    Conjugate,
}

/// Rules for resetting conjugacy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestartPolicy {
    /// `|<d_old, g_new - g_old>|` below this resets the direction.
    pub min_denominator: f64,
    /// Treat every beta as zero (reduces conjugate mode to steepest).
    pub force_zero_beta: bool,
    /// Reset every `n` iterations if set.
    pub every: Option<usize>,
    /// A beta above this resets the direction. Beta estimates the ratio of
    /// successive gradients, so a value above 1 means the gradient grew.
    pub max_beta: Option<f64>,
}

impl Default for RestartPolicy {
    fn default() -> Self {
        RestartPolicy {
            min_denominator: 1e-12,
            force_zero_beta: false,
            every: None,
            max_beta: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub mode: Mode,
    pub max_iters: usize,
    /// Stop when one iteration changes the bound by less than this (nats).
    pub tol: f64,
    pub restart: RestartPolicy,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mode: Mode::Conjugate,
            max_iters: 1000,
            tol: 1e-6,
            restart: RestartPolicy::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol = {} must be > 0", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    UnitNatural,
    Conjugate,
    Fallback,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::UnitNatural => "unit_natural",
            StepKind::Conjugate => "conjugate",
            StepKind::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub bound: f64,
    pub step_kind: StepKind,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

/// Natural gradient in `gamma` coordinates, without any matrix inversion.
pub fn natural_gradient(phi: &DMatrix<f64>, grad_phi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = grad_phi.clone();
    for (n, mut row) in out.row_iter_mut().enumerate() {
        let centre: f64 = phi.row(n).dot(&grad_phi.row(n));
        row.add_scalar_mut(-centre);
    }
    out
}

/// Fisher information of one softmax row, `diag(phi) - phi phi'`.
pub fn fisher_matrix(phi_row: &[f64]) -> DMatrix<f64> {
    let k = phi_row.len();
    DMatrix::from_fn(k, k, |i, j| {
        let d = if i == j { phi_row[i] } else { 0.0 };
        d - phi_row[i] * phi_row[j]
    })
}

/// Euclidean gradient in `gamma` by the softmax chain rule. Rows sum to zero.
pub fn euclid_gamma_grad(phi: &DMatrix<f64>, grad_phi: &DMatrix<f64>) -> DMatrix<f64> {
    natural_gradient(phi, grad_phi).component_mul(phi)
}

/// Hestenes-Stiefel direction `d = nat_new + beta d_old` with
/// `beta = <nat_new, g_new - g_old> / <d_old, g_new - g_old>`, reset to 0
/// when the denominator is tiny, when beta is negative or non-finite, or
/// when it exceeds the policy's cap. Returns the direction and the beta used.
pub fn hs_direction(
    nat_new: &DMatrix<f64>,
    g_new: &DMatrix<f64>,
    previous: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    policy: &RestartPolicy,
) -> (DMatrix<f64>, f64) {
    let Some((g_old, d_old)) = previous else {
        return (nat_new.clone(), 0.0);
    };
    if policy.force_zero_beta {
        return (nat_new.clone(), 0.0);
    }
    let y = g_new - g_old;
    let num = nat_new.dot(&y);
    let den = d_old.dot(&y);
    let beta = if den.abs() < policy.min_denominator {
        0.0
    } else {
        num / den
    };
    if !beta.is_finite() || beta <= 0.0 || policy.max_beta.is_some_and(|m| beta > m) {
        return (nat_new.clone(), 0.0);
    }
    (nat_new + d_old * beta, beta)
}

/// Outcome of a single accepted step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub kind: StepKind,
    pub breakdown: BoundBreakdown,
    pub grad_phi: DMatrix<f64>,
}

/// Tries `gamma + direction`; if the bound is non-finite or lower than
/// `current`, takes the unit natural step `gamma + natural` instead.
/// `resp` is updated in place.
pub fn step_and_accept(
    objective: &Objective<'_>,
    resp: &mut Responsibilities,
    direction: &DMatrix<f64>,
    natural: &DMatrix<f64>,
    current: f64,
    kind: StepKind,
) -> Result<StepOutcome> {
    let candidate = Responsibilities::from_gamma(resp.gamma() + direction);
    match objective.bound_and_grad(&candidate) {
        Ok((bd, g)) if bd.total >= current || kind == StepKind::UnitNatural => {
            *resp = candidate;
            return Ok(StepOutcome {
                kind,
                breakdown: bd,
                grad_phi: g,
            });
        }
        Ok(_) | Err(Error::NonFinite(_)) => {}
        Err(e) => return Err(e),
    }
    let fallback = Responsibilities::from_gamma(resp.gamma() + natural);
    let (bd, g) = objective.bound_and_grad(&fallback)?;
    *resp = fallback;
    Ok(StepOutcome {
        kind: StepKind::Fallback,
        breakdown: bd,
        grad_phi: g,
    })
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub initial: BoundBreakdown,
    pub last: BoundBreakdown,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
}

impl OptimizeReport {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// First iteration whose bound reaches `target`, if any (0 if the
    /// starting point already does).
    pub fn iterations_to_reach(&self, target: f64) -> Option<usize> {
        if self.initial.total >= target {
            return Some(0);
        }
        self.trace.iter().find(|r| r.bound >= target).map(|r| r.iter)
    }
}

/// Climbs the bound until one iteration changes it by less than `tol` or
/// `max_iters` iterations have run. Leaves `resp` at the best state visited.
pub fn optimize(
    objective: &Objective<'_>,
    resp: &mut Responsibilities,
    config: &OptimizerConfig,
) -> Result<OptimizeReport> {
    config.validate()?;
    let start = Instant::now();
    let (initial, mut grad_phi) = objective.bound_and_grad(resp)?;
    let mut current = initial;
    let mut trace = Vec::new();
    let mut memory: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut converged = false;
    let mut best: Option<(BoundBreakdown, Responsibilities)> = None;

    for iter in 1..=config.max_iters {
        let nat = natural_gradient(resp.phi(), &grad_phi);
        let g = nat.component_mul(resp.phi());
        let restart_now = config.restart.every.is_some_and(|e| e > 0 && iter % e == 0);
        let (direction, kind) = match config.mode {
            Mode::Steepest => (nat.clone(), StepKind::UnitNatural),
            Mode::Conjugate => {
                let prev = if restart_now {
                    None
                } else {
                    memory.as_ref().map(|(g_old, d_old)| (g_old, d_old))
                };
                let (d, beta) = hs_direction(&nat, &g, prev, &config.restart);
                let kind = if beta > 0.0 {
                    StepKind::Conjugate
                } else {
                    StepKind::UnitNatural
                };
                (d, kind)
            }
        };
        let before = resp.clone();
        let outcome = step_and_accept(objective, resp, &direction, &nat, current.total, kind)?;
        let taken = if outcome.kind == StepKind::Fallback {
            nat
        } else {
            direction
        };
        memory = Some((g, taken));
        let delta = outcome.breakdown.total - current.total;
        // Unit steps are always taken, so rounding can lower the bound near convergence.
        if delta < 0.0 && best.is_none() {
            best = Some((current, before.clone()));
        } else if let Some((b, _)) = &best {
            if outcome.breakdown.total >= b.total {
                best = None;
            }
        }
        current = outcome.breakdown;
        grad_phi = outcome.grad_phi;
        trace.push(TraceRecord {
            iter,
            bound: current.total,
            step_kind: outcome.kind,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if delta.abs() < config.tol {
            converged = true;
            break;
        }
    }
    if let Some((b, r)) = best {
        current = b;
        *resp = r;
    }
    Ok(OptimizeReport {
        initial,
        last: current,
        trace,
        converged,
    })
}
