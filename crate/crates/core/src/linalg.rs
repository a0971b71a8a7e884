use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub(crate) type Chol = Cholesky<f64, Dyn>;

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// Cholesky factor of a symmetric matrix. The bare matrix is tried first;
/// on failure `1e-8 * mean(diag)` is added and escalated tenfold up to
/// `1e-2 * mean(diag)`. Returns the factor and the jitter that was added.
pub(crate) fn robust_cholesky(m: &DMatrix<f64>, what: &str) -> Result<(Chol, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} has non-finite entries")));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let n = m.nrows().max(1);
    let scale = (m.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut mj = m.clone();
        for i in 0..m.nrows() {
            mj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(mj) {
            return Ok((c, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        what: what.to_string(),
        jitter: JITTER_MAX * scale,
    })
}

pub(crate) fn log_det(c: &Chol) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `tr(A^{-1} G)` through the factor of `A`.
pub(crate) fn trace_solve(c: &Chol, g: &DMatrix<f64>) -> f64 {
    c.solve(g).trace()
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub(crate) fn quad(x: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (m * x).dot(x)
}

pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
