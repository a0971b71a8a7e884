//! Explicit mean-field VBEM, kept as a reference for the natural-gradient
//! machinery. It forms each `q(f_k)` and the expected log-likelihoods
//! directly instead of differentiating the collapsed bound.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::gamma::digamma;

use crate::bound::{softmax_rows, tail_sums};
use crate::error::{Error, Result};
use crate::hgp::{GroupedDataset, Hypers};
use crate::linalg::LN_2PI;

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    m.cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite { what: what.into(), jitter: 0.0 })
}

/// `q(f_k)` for every cluster: `S_k = (K_f^{-1} + hat_k K_y^{-1})^{-1}`,
/// `m_k = S_k K_y^{-1} sum_n phi_nk y_n`, evaluated as
/// `S_k = K_f - hat_k K_f B^{-1} K_f` and `m_k = K_f B^{-1} sum_n phi_nk y_n`
/// with `B = K_y + hat_k K_f`, so that `K_f` is never inverted.
pub fn latent_factors(
    data: &GroupedDataset,
    phi: &DMatrix<f64>,
    hypers: &Hypers,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let design = data.design();
    let kf = hypers.cluster.matrix(&design.times);
    let ky = hypers.structure.matrix(design);
    let sums = data.values() * phi;
    (0..phi.ncols())
        .map(|k| {
            let w = phi.column(k).sum();
            let b = cholesky(&ky + &kf * w, "posterior system")?;
            let m = &kf * b.solve(&sums.column(k).into_owned());
            let mut s = &kf - &kf * b.solve(&kf) * w;
            s = (&s + s.transpose()) * 0.5;
            Ok((m, s))
        })
        .collect()
}

/// `E[ln pi_k]` under `q(v_k) = Beta(1 + hat_k, alpha + tilde_k)`.
pub fn expected_log_weights(phi_hat: &[f64], alpha: f64) -> Vec<f64> {
    let tilde = tail_sums(phi_hat);
    let mut carry = 0.0;
    phi_hat
        .iter()
        .zip(&tilde)
        .map(|(&a, &b)| {
            let (a, b) = (1.0 + a, alpha + b);
            let total = digamma(a + b);
            let out = digamma(a) - total + carry;
            carry += digamma(b) - total;
            out
        })
        .collect()
}

/// One round of mean-field updates: `q(f)`, `q(v)` from the current `phi`,
/// then `q(z_n) ∝ exp(E[ln pi_k] + E[ln N(y_n | f_k, K_y)])`.
pub fn meanfield_vbem_round(
    data: &GroupedDataset,
    phi: &DMatrix<f64>,
    hypers: &Hypers,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let factors = latent_factors(data, phi, hypers)?;
    let ky = cholesky(hypers.structure.matrix(data.design()), "K_y")?;
    let ky_logdet = 2.0 * ky.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let d = data.dim() as f64;
    let phi_hat: Vec<f64> = phi.column_iter().map(|c| c.sum()).collect();
    let log_w = expected_log_weights(&phi_hat, alpha);
    let logits = DMatrix::from_fn(data.n_groups(), phi.ncols(), |n, k| {
        let (m, s) = &factors[k];
        let r = data.values().column(n) - m;
        let ell = -0.5 * (d * LN_2PI + ky_logdet)
            - 0.5 * r.dot(&ky.solve(&r))
            - 0.5 * ky.solve(s).trace();
        log_w[k] + ell
    });
    Ok(softmax_rows(&logits))
}
