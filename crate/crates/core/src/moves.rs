//! Split, prune and reorder moves on the responsibilities.
//!
//! Splits and reorders are proposals: the state changes only when the bound
//! strictly increases, otherwise it is left bit-identical. Pruning of
//! near-empty columns is unconditional.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bound::{stick_term, Objective, Responsibilities};
use crate::error::{Error, Result};
use crate::optimizer::{optimize, OptimizerConfig};

/// Perturbation applied in `gamma` to the two halves of a split column.
pub const SPLIT_DELTA: f64 = 1e-3;
/// Default `hat_k` below which a column counts as empty.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-6;
/// Minimum bound improvement for a proposal to be accepted.
pub const ACCEPT_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "snake_case")]
pub enum MoveKind {
    Split(usize),
    Prune(usize),
    Reorder,
}

impl MoveKind {
    pub fn name(&self) -> &'static str {
        match self {
            MoveKind::Split(_) => "split",
            MoveKind::Prune(_) => "prune",
            MoveKind::Reorder => "reorder",
        }
    }

    pub fn column(&self) -> Option<usize> {
        match *self {
            MoveKind::Split(k) | MoveKind::Prune(k) => Some(k),
            MoveKind::Reorder => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveProposal {
    pub kind: MoveKind,
    pub before_bound: f64,
    pub after_bound: f64,
    pub accepted: bool,
}

/// The state right after splitting column `k`, before any optimization.
/// Column `k` keeps half of its mass (times `e^{±delta}` on alternating
/// rows) and a new last column receives the rest, so every row of `phi`
/// still sums to one and column sums are preserved.
pub fn split_responsibilities(resp: &Responsibilities, k: usize, delta: f64) -> Responsibilities {
    let (n, kk) = (resp.n(), resp.k());
    let gamma = resp.gamma();
    let mut out = DMatrix::zeros(n, kk + 1);
    out.view_mut((0, 0), (n, kk)).copy_from(gamma);
    for i in 0..n {
        let d = if i % 2 == 0 { delta } else { -delta };
        let norm = (2.0 * d.cosh()).ln();
        let g = gamma[(i, k)];
        out[(i, k)] = g + d - norm;
        out[(i, kk)] = g - d - norm;
    }
    Responsibilities::from_gamma(out)
}

/// Proposes splitting column `k`: split, optimize to convergence, prune.
/// Accepted when the bound strictly increases and both halves survive
/// pruning. Other columns emptied along the way are pruned with it.
pub fn split(
    objective: &Objective<'_>,
    resp: &mut Responsibilities,
    k: usize,
    config: &OptimizerConfig,
    prune_threshold: f64,
) -> Result<MoveProposal> {
    if k >= resp.k() {
        return Err(Error::InvalidArgument(format!(
            "cannot split column {k} of {}",
            resp.k()
        )));
    }
    let before = objective.bound(resp)?.total;
    let mut candidate = split_responsibilities(resp, k, SPLIT_DELTA);
    optimize(objective, &mut candidate, config)?;
    let new_col = resp.k();
    let (candidate, removed) = prune_columns(&candidate, prune_threshold);
    let after = objective.bound(&candidate)?.total;
    let survived = !removed.contains(&k) && !removed.contains(&new_col);
    let accepted = survived && after > before + ACCEPT_MARGIN;
    if accepted {
        *resp = candidate;
    }
    Ok(MoveProposal {
        kind: MoveKind::Split(k),
        before_bound: before,
        after_bound: after,
        accepted,
    })
}

fn prune_columns(resp: &Responsibilities, threshold: f64) -> (Responsibilities, Vec<usize>) {
    let hat = resp.phi_hat();
    let mut removed: Vec<usize> = (0..hat.len()).filter(|&k| hat[k] < threshold).collect();
    if removed.len() == hat.len() {
        // Keep the heaviest column.
        let best = argmax_first(&hat);
        removed.retain(|&k| k != best);
    }
    if removed.is_empty() {
        return (resp.clone(), removed);
    }
    let keep: Vec<usize> = (0..hat.len()).filter(|k| !removed.contains(k)).collect();
    let gamma = resp.gamma().select_columns(keep.iter());
    (Responsibilities::from_gamma(gamma), removed)
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Removes every column with `hat_k < threshold` and renormalizes rows. The
/// last remaining column is never removed. One accepted proposal is
/// returned per removed column, indexed as before removal.
pub fn prune_empty(
    objective: &Objective<'_>,
    resp: &mut Responsibilities,
    threshold: f64,
) -> Result<Vec<MoveProposal>> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("prune threshold {threshold} must be >= 0")));
    }
    let (pruned, removed) = prune_columns(resp, threshold);
    if removed.is_empty() {
        return Ok(Vec::new());
    }
    let before = objective.bound(resp)?.total;
    let after = objective.bound(&pruned)?.total;
    *resp = pruned;
    Ok(removed
        .into_iter()
        .map(|k| MoveProposal {
            kind: MoveKind::Prune(k),
            before_bound: before,
            after_bound: after,
            accepted: true,
        })
        .collect())
}

/// Column order with descending `hat_k`; ties keep their current order.
pub fn descending_order(phi_hat: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..phi_hat.len()).collect();
    order.sort_by(|&a, &b| phi_hat[b].total_cmp(&phi_hat[a]));
    order
}

/// Sorts columns by descending `hat_k` if that strictly increases the bound.
/// Only the stick term can change under a column permutation.
pub fn reorder(objective: &Objective<'_>, resp: &mut Responsibilities) -> Result<MoveProposal> {
    let hat = resp.phi_hat();
    let order = descending_order(&hat);
    let before = objective.bound(resp)?.total;
    if order.iter().enumerate().all(|(i, &k)| i == k) {
        return Ok(MoveProposal {
            kind: MoveKind::Reorder,
            before_bound: before,
            after_bound: before,
            accepted: false,
        });
    }
    let sorted: Vec<f64> = order.iter().map(|&k| hat[k]).collect();
    let gain = stick_term(&sorted, objective.alpha()) - stick_term(&hat, objective.alpha());
    let candidate = Responsibilities::from_gamma(resp.gamma().select_columns(order.iter()));
    let after = objective.bound(&candidate)?.total;
    let accepted = gain > 0.0 && after > before + ACCEPT_MARGIN;
    if accepted {
        *resp = candidate;
    }
    Ok(MoveProposal {
        kind: MoveKind::Reorder,
        before_bound: before,
        after_bound: after,
        accepted,
    })
}

/// One round of moves: split candidates are tried in descending `hat_k`
/// order until one is accepted, then empty columns are pruned and the
/// columns are reordered.
pub fn move_round(
    objective: &Objective<'_>,
    resp: &mut Responsibilities,
    config: &OptimizerConfig,
    prune_threshold: f64,
) -> Result<Vec<MoveProposal>> {
    let mut log = Vec::new();
    for k in descending_order(&resp.phi_hat()) {
        if resp.phi_hat()[k] < prune_threshold {
            continue;
        }
        let p = split(objective, resp, k, config, prune_threshold)?;
        log.push(p);
        if p.accepted {
            break;
        }
    }
    log.extend(prune_empty(objective, resp, prune_threshold)?);
    log.push(reorder(objective, resp)?);
    Ok(log)
}
