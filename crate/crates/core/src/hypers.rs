//! Kernel hyperparameters: initialization heuristics and monotone gradient
//! ascent of the bound in log-parameter space at fixed responsibilities.

use serde::{Deserialize, Serialize};

use crate::bound::{BoundBreakdown, Objective, Responsibilities};
use crate::error::{Error, Result};
use crate::hgp::{GroupedDataset, Hypers};
use crate::kernels::KernelSpec;

/// Share of the data variance given to the cluster-level kernel.
pub const CLUSTER_SHARE: f64 = 0.6;
/// Share given to the non-noise structure layers, split equally.
pub const STRUCTURE_SHARE: f64 = 0.3;
/// Share given to white noise.
pub const NOISE_SHARE: f64 = 0.1;

/// Initial and maximum per-parameter step in log-parameter space.
pub const INITIAL_STEP: f64 = 0.1;
pub const MAX_STEP: f64 = 0.5;
const GROWTH: f64 = 1.2;
pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperSchedule {
    /// Cap on variational iterations in each phase.
    pub vb_iters_per_phase: usize,
    pub hyper_steps_per_phase: usize,
    pub phases: usize,
}

impl Default for HyperSchedule {
    fn default() -> Self {
        HyperSchedule {
            vb_iters_per_phase: 1000,
            hyper_steps_per_phase: 25,
            phases: 3,
        }
    }
}

impl HyperSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.vb_iters_per_phase == 0 || self.hyper_steps_per_phase == 0 || self.phases == 0 {
            return Err(Error::InvalidArgument(format!(
                "schedule entries must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

fn variance_params(k: &KernelSpec) -> usize {
    let mut count = 0;
    let mut k = k.clone();
    k.map_params(&mut |_, name, _| {
        if name == "variance" {
            count += 1;
        }
    });
    count
}

fn fill(k: &mut KernelSpec, lengthscale: f64, variance: f64, noise: f64) {
    k.map_params(&mut |_, name, v| match name {
        "lengthscale" => *v = lengthscale,
        "variance" => *v = variance,
        "noise" => *v = noise,
        _ => {}
    });
}

/// Applies the initialization heuristics to the kinds and layout of
/// `template`: every lengthscale is half the time span; with `s2` the
/// variance of all values, the cluster kernel gets `0.6 s2`, the other
/// layers share `0.3 s2` and white noise gets `0.1 s2`. Shares are split
/// equally between parameters of the same role. Periods are kept.
pub fn init_hypers(data: &GroupedDataset, template: &Hypers) -> Result<Hypers> {
    let values = data.values();
    let count = values.len() as f64;
    let mean = values.sum() / count;
    let s2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    if !(s2 > 0.0) || !s2.is_finite() {
        return Err(Error::InvalidData(format!(
            "data variance is {s2}; cannot initialize hyperparameters"
        )));
    }
    let span = data.design().span();
    if !(span > 0.0) {
        return Err(Error::InvalidData("all time points coincide".into()));
    }
    let ell = 0.5 * span;

    let mut noise_params = 0;
    let mut count_noise = |k: &KernelSpec| {
        let mut k = k.clone();
        k.map_params(&mut |_, name, _| {
            if name == "noise" {
                noise_params += 1;
            }
        });
    };
    count_noise(&template.cluster);
    for l in &template.structure.layers {
        count_noise(&l.kernel);
    }
    let noise = NOISE_SHARE * s2 / noise_params.max(1) as f64;

    let mut out = template.clone();
    let cluster_var = CLUSTER_SHARE * s2 / variance_params(&template.cluster).max(1) as f64;
    fill(&mut out.cluster, ell, cluster_var, noise);
    let structure_vars: usize = template
        .structure
        .layers
        .iter()
        .map(|l| variance_params(&l.kernel))
        .sum();
    let layer_var = STRUCTURE_SHARE * s2 / structure_vars.max(1) as f64;
    for l in &mut out.structure.layers {
        fill(&mut l.kernel, ell, layer_var, noise);
    }
    out.validate(data.design())?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperStep {
    pub step: usize,
    /// Free parameters (natural scale) after the step.
    pub params: Vec<(String, f64)>,
    pub bound: f64,
}

/// Result of [`optimize_hypers`].
pub struct HyperOutcome<'a> {
    pub objective: Objective<'a>,
    pub breakdown: BoundBreakdown,
    pub trajectory: Vec<HyperStep>,
}

/// Gradient ascent on the free log-parameters with `phi` fixed.
///
/// Every parameter moves by its own step length in the direction of its
/// gradient component. Lengths start at 0.1, grow by 1.2 while the sign of
/// the component is stable and halve when it flips, so parameters with very
/// different gradient scales progress at similar rates. A step that fails to
/// increase the bound (or breaks a factorization) is retried with all
/// lengths halved, up to 20 times, after which the ascent stops. The bound
/// never decreases.
pub fn optimize_hypers<'a>(
    objective: Objective<'a>,
    resp: &Responsibilities,
    steps: usize,
) -> Result<HyperOutcome<'a>> {
    let mut objective = objective;
    let mut current = objective.bound(resp)?;
    let mut trajectory = Vec::new();
    let dim = objective.hypers().free_params().len();
    let mut lengths = vec![INITIAL_STEP; dim];
    let mut last_sign = vec![0.0f64; dim];
    for step in 1..=steps {
        let grad: Vec<f64> = objective.grad_hypers(resp)?.into_iter().map(|(_, g)| g).collect();
        if grad.iter().any(|g| !g.is_finite()) {
            lengths.iter_mut().for_each(|l| *l *= 0.5);
            continue;
        }
        if grad.iter().all(|&g| g == 0.0) {
            break;
        }
        for i in 0..dim {
            let sign = grad[i].signum();
            if sign * last_sign[i] > 0.0 {
                lengths[i] = (lengths[i] * GROWTH).min(MAX_STEP);
            } else if sign * last_sign[i] < 0.0 {
                lengths[i] *= 0.5;
            }
            last_sign[i] = sign;
        }
        let theta = objective.hypers().free_log_params();
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let proposal: Vec<f64> = (0..dim)
                .map(|i| theta[i] + lengths[i] * grad[i].signum())
                .collect();
            let hypers = objective.hypers().with_free_log_params(&proposal);
            if let Ok(candidate) = objective.with_hypers(hypers) {
                if let Ok(bd) = candidate.bound(resp) {
                    if bd.total > current.total {
                        accepted = Some((candidate, bd));
                        break;
                    }
                }
            }
            lengths.iter_mut().for_each(|l| *l *= 0.5);
        }
        let Some((candidate, bd)) = accepted else {
            break;
        };
        objective = candidate;
        current = bd;
        trajectory.push(HyperStep {
            step,
            params: objective.hypers().free_params(),
            bound: current.total,
        });
    }
    Ok(HyperOutcome {
        objective,
        breakdown: current,
        trajectory,
    })
}
