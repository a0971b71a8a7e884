//! The collapsed lower bound on the marginal likelihood.
//!
//! With `q(Z) = prod_n Cat(z_n | phi_n)` and every other variable integrated
//! out, the bound splits into three terms:
//!
//! * a data term, `sum_k ln int exp{sum_n phi_nk ln N(y_n | f_k, K_y)} N(f_k | 0, K_f) df_k`,
//! * a stick term, `sum_k ln[Gamma(hat_k + 1) Gamma(tilde_k + alpha) alpha / Gamma(hat_k + tilde_k + alpha + 1)]`,
//! * the entropy of `q(Z)`,
//!
//! where `hat_k = sum_n phi_nk` and `tilde_k = sum_{i > k} hat_i`.
//!
//! For one cluster with `w = hat_k`, `s = sum_n phi_nk y_n` and
//! `B = K_y + w K_f` the Gaussian integral is
//!
//! ```text
//! sum_n phi_nk c_n + 1/2 ln|K_y| - 1/2 ln|B| + 1/2 (K_y^{-1} s)' K_f B^{-1} s
//! c_n = -1/2 (D ln 2pi + ln|K_y|) - 1/2 y_n' K_y^{-1} y_n
//! ```
//!
//! and its derivative in `phi_nk` is the expected log-likelihood of `y_n`
//! under the cluster posterior `N(m_k, S_k)`, with `m_k = K_f B^{-1} s` and
//! `S_k = K_f - w K_f B^{-1} K_f`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::hgp::{self, GroupedDataset, Hypers, EMPTY_WEIGHT};
use crate::linalg::{self, Chol, LN_2PI};

/// Row-softmax of an unconstrained matrix, with per-row max subtraction.
pub fn softmax_rows(gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let mut phi = gamma.clone();
    for mut row in phi.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    phi
}

fn log_softmax_rows(gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = gamma.clone();
    for mut row in out.row_iter_mut() {
        let lse = linalg::logsumexp(row.iter().copied().collect::<Vec<_>>().into_iter());
        row.add_scalar_mut(-lse);
    }
    out
}

/// Variational allocation parameters: unconstrained `gamma` and its row
/// softmax `phi`. `gamma` is the only free state; `phi` and `ln phi` are
/// derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    gamma: DMatrix<f64>,
    phi: DMatrix<f64>,
    log_phi: DMatrix<f64>,
}

impl Responsibilities {
    pub fn from_gamma(gamma: DMatrix<f64>) -> Self {
        let phi = softmax_rows(&gamma);
        let log_phi = log_softmax_rows(&gamma);
        Responsibilities {
            gamma,
            phi,
            log_phi,
        }
    }

    /// Responsibilities whose softmax reproduces `phi` (rows must be strictly
    /// positive).
    pub fn from_phi(phi: &DMatrix<f64>) -> Self {
        Self::from_gamma(phi.map(|v| v.ln()))
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn log_phi(&self) -> &DMatrix<f64> {
        &self.log_phi
    }

    pub fn n(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn k(&self) -> usize {
        self.gamma.ncols()
    }

    /// Effective cluster sizes.
    pub fn phi_hat(&self) -> Vec<f64> {
        column_sums(&self.phi)
    }
}

fn column_sums(phi: &DMatrix<f64>) -> Vec<f64> {
    phi.column_iter().map(|c| c.sum()).collect()
}

/// `hat_k`, `tilde_k` and the weighted data sums of every cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub phi_hat: Vec<f64>,
    pub phi_tilde: Vec<f64>,
    /// `D x K`, column `k` is `sum_n phi_nk y_n`.
    pub weighted_sums: DMatrix<f64>,
}

impl SuffStats {
    pub fn new(data: &GroupedDataset, phi: &DMatrix<f64>) -> Self {
        let phi_hat = column_sums(phi);
        SuffStats {
            phi_tilde: tail_sums(&phi_hat),
            phi_hat,
            weighted_sums: data.values() * phi,
        }
    }
}

/// `tilde_k = sum_{i > k} hat_i`.
pub fn tail_sums(phi_hat: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; phi_hat.len()];
    let mut acc = 0.0;
    for k in (0..phi_hat.len()).rev() {
        out[k] = acc;
        acc += phi_hat[k];
    }
    out
}

/// The three additive terms of the bound, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundBreakdown {
    pub data_term: f64,
    pub stick_term: f64,
    pub entropy_term: f64,
    pub total: f64,
}

impl BoundBreakdown {
    fn new(data_term: f64, stick_term: f64, entropy_term: f64) -> Self {
        BoundBreakdown {
            data_term,
            stick_term,
            entropy_term,
            total: data_term + stick_term + entropy_term,
        }
    }
}

/// Gaussian posterior over one cluster's latent function at the design points.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// The collapsed stick-breaking term.
pub fn stick_term(phi_hat: &[f64], alpha: f64) -> f64 {
    let tilde = tail_sums(phi_hat);
    phi_hat
        .iter()
        .zip(&tilde)
        .map(|(&h, &t)| {
            if h == 0.0 {
                // Gamma(x + 1) = x Gamma(x) reduces the term to ln(alpha / (t + alpha)).
                -(t / alpha).ln_1p()
            } else {
                ln_gamma(h + 1.0) + ln_gamma(t + alpha) + alpha.ln() - ln_gamma(h + t + alpha + 1.0)
            }
        })
        .sum()
}

/// `d stick / d hat_j` for every `j`.
pub fn stick_grad(phi_hat: &[f64], alpha: f64) -> Vec<f64> {
    let tilde = tail_sums(phi_hat);
    let mut out = Vec::with_capacity(phi_hat.len());
    // Contribution of earlier sticks through tilde_k, k < j.
    let mut carry = 0.0;
    for (&h, &t) in phi_hat.iter().zip(&tilde) {
        let total = digamma(h + t + alpha + 1.0);
        out.push(digamma(h + 1.0) - total + carry);
        carry += digamma(t + alpha) - total;
    }
    out
}

/// `-sum phi ln phi` with `0 ln 0 = 0`.
pub fn entropy(phi: &DMatrix<f64>) -> f64 {
    -phi.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn entropy_with_logs(phi: &DMatrix<f64>, log_phi: &DMatrix<f64>) -> f64 {
    -phi.iter()
        .zip(log_phi.iter())
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &l)| p * l)
        .sum::<f64>()
}

struct ClusterFactor {
    chol: Chol,
    /// `B^{-1} s`
    a: DVector<f64>,
    /// `m = K_f a`
    mean: DVector<f64>,
}

/// Bound, gradients and posteriors for a fixed dataset, hyperparameter
/// setting and concentration. Holds the shared factor of `K_y`.
pub struct Objective<'a> {
    data: &'a GroupedDataset,
    hypers: Hypers,
    alpha: f64,
    kf: DMatrix<f64>,
    ky: DMatrix<f64>,
    ky_chol: Chol,
    ky_logdet: f64,
    /// `K_y^{-1} Y`, `D x N`
    ky_inv_y: DMatrix<f64>,
    /// Per-group constant `c_n` of the expected log-likelihood.
    c: DVector<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(data: &'a GroupedDataset, hypers: Hypers, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha = {alpha} must be > 0")));
        }
        hypers.validate(data.design())?;
        let design = data.design();
        let kf = hypers.cluster.matrix(&design.times);
        let ky = hypers.structure.matrix(design);
        let (ky_chol, jitter) = linalg::robust_cholesky(&ky, "within-group covariance")?;
        let ky = if jitter > 0.0 {
            let mut m = ky;
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            m
        } else {
            ky
        };
        let ky_logdet = linalg::log_det(&ky_chol);
        let ky_inv_y = ky_chol.solve(data.values());
        let d = data.dim() as f64;
        let c = DVector::from_fn(data.n_groups(), |n, _| {
            -0.5 * (d * LN_2PI + ky_logdet) - 0.5 * data.values().column(n).dot(&ky_inv_y.column(n))
        });
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("data log-likelihood constants".into()));
        }
        Ok(Objective {
            data,
            hypers,
            alpha,
            kf,
            ky,
            ky_chol,
            ky_logdet,
            ky_inv_y,
            c,
        })
    }

    pub fn data(&self) -> &'a GroupedDataset {
        self.data
    }

    pub fn hypers(&self) -> &Hypers {
        &self.hypers
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Same data and concentration with different hyperparameters.
    pub fn with_hypers(&self, hypers: Hypers) -> Result<Objective<'a>> {
        Objective::new(self.data, hypers, self.alpha)
    }

    fn check_shape(&self, phi: &DMatrix<f64>) -> Result<()> {
        if phi.nrows() != self.data.n_groups() || phi.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "responsibilities are {}x{}, dataset has {} groups",
                phi.nrows(),
                phi.ncols(),
                self.data.n_groups()
            )));
        }
        Ok(())
    }

    fn factor_cluster(&self, weight: f64, s: &DVector<f64>) -> Result<ClusterFactor> {
        let b = &self.ky + &self.kf * weight;
        let (chol, _) = if weight == 0.0 {
            (self.ky_chol.clone(), 0.0)
        } else {
            linalg::robust_cholesky(&b, "cluster system K_y + w K_f")?
        };
        let a = chol.solve(s);
        let mean = &self.kf * &a;
        Ok(ClusterFactor { chol, a, mean })
    }

    fn data_term_inner(
        &self,
        phi: &DMatrix<f64>,
        stats: &SuffStats,
    ) -> Result<(f64, Vec<ClusterFactor>)> {
        let u = &self.ky_inv_y * phi; // K_y^{-1} s_k
        let mut total = (phi.transpose() * &self.c).sum();
        let mut factors = Vec::with_capacity(phi.ncols());
        for k in 0..phi.ncols() {
            let s = stats.weighted_sums.column(k).into_owned();
            let f = self.factor_cluster(stats.phi_hat[k], &s)?;
            total += 0.5 * self.ky_logdet - 0.5 * linalg::log_det(&f.chol)
                + 0.5 * u.column(k).dot(&f.mean);
            factors.push(f);
        }
        Ok((total, factors))
    }

    fn evaluate(
        &self,
        phi: &DMatrix<f64>,
        log_phi: &DMatrix<f64>,
        want_grad: bool,
    ) -> Result<(BoundBreakdown, Option<DMatrix<f64>>)> {
        self.check_shape(phi)?;
        let stats = SuffStats::new(self.data, phi);
        let (data_term, factors) = self.data_term_inner(phi, &stats)?;
        let stick = stick_term(&stats.phi_hat, self.alpha);
        let ent = entropy_with_logs(phi, log_phi);
        let bd = BoundBreakdown::new(data_term, stick, ent);
        if !bd.total.is_finite() {
            return Err(Error::NonFinite(format!("bound evaluated to {}", bd.total)));
        }
        if !want_grad {
            return Ok((bd, None));
        }
        let (n, k) = phi.shape();
        let means = DMatrix::from_fn(self.data.dim(), k, |i, j| factors[j].mean[i]);
        // y_n' K_y^{-1} m_k
        let cross = self.ky_inv_y.transpose() * &means;
        let stick_g = stick_grad(&stats.phi_hat, self.alpha);
        let per_cluster: Vec<f64> = factors
            .iter()
            .map(|f| {
                let tr = linalg::trace_solve(&f.chol, &self.kf);
                let m_ky_m = f.mean.dot(&self.ky_chol.solve(&f.mean));
                -0.5 * tr - 0.5 * m_ky_m
            })
            .collect();
        let grad = DMatrix::from_fn(n, k, |i, j| {
            self.c[i] + cross[(i, j)] + per_cluster[j] + stick_g[j] - log_phi[(i, j)] - 1.0
        });
        Ok((bd, Some(grad)))
    }

    /// The bound at the given responsibilities.
    pub fn bound(&self, resp: &Responsibilities) -> Result<BoundBreakdown> {
        Ok(self.evaluate(resp.phi(), resp.log_phi(), false)?.0)
    }

    /// The bound and `dL/dphi` (total derivative, treating `phi` as free).
    pub fn bound_and_grad(&self, resp: &Responsibilities) -> Result<(BoundBreakdown, DMatrix<f64>)> {
        let (bd, g) = self.evaluate(resp.phi(), resp.log_phi(), true)?;
        Ok((bd, g.expect("gradient requested")))
    }

    /// The bound as a function of an arbitrary nonnegative `phi` (rows need
    /// not sum to one); exact zeros are allowed.
    pub fn bound_phi(&self, phi: &DMatrix<f64>) -> Result<BoundBreakdown> {
        Ok(self.evaluate(phi, &phi.map(f64::ln), false)?.0)
    }

    /// `dL/dphi` at an arbitrary strictly positive `phi`.
    pub fn grad_phi(&self, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(phi, &phi.map(f64::ln), true)?.1.expect("gradient requested"))
    }

    /// The data term together with every cluster's posterior at the design
    /// points. Clusters with `hat_k <= 1e-10` get the prior.
    pub fn data_term(&self, phi: &DMatrix<f64>) -> Result<(f64, Vec<ClusterPosterior>)> {
        self.check_shape(phi)?;
        let stats = SuffStats::new(self.data, phi);
        let (total, factors) = self.data_term_inner(phi, &stats)?;
        let posts = factors
            .iter()
            .zip(&stats.phi_hat)
            .map(|(f, &w)| {
                if w <= EMPTY_WEIGHT {
                    ClusterPosterior {
                        mean: DVector::zeros(self.data.dim()),
                        cov: self.kf.clone(),
                    }
                } else {
                    let mut cov = &self.kf - &self.kf * f.chol.solve(&self.kf) * w;
                    linalg::symmetrize(&mut cov);
                    ClusterPosterior {
                        mean: f.mean.clone(),
                        cov,
                    }
                }
            })
            .collect();
        Ok((total, posts))
    }

    /// `dL/d(log theta)` for every free hyperparameter, in
    /// [`Hypers::free_params`] order, at fixed responsibilities.
    pub fn grad_hypers(&self, resp: &Responsibilities) -> Result<Vec<(String, f64)>> {
        self.grad_hypers_phi(resp.phi())
    }

    pub fn grad_hypers_phi(&self, phi: &DMatrix<f64>) -> Result<Vec<(String, f64)>> {
        self.check_shape(phi)?;
        let stats = SuffStats::new(self.data, phi);
        let (_, factors) = self.data_term_inner(phi, &stats)?;
        let design = self.data.design();
        let row_mass: Vec<f64> = phi.row_iter().map(|r| r.sum()).collect();
        let total_mass: f64 = stats.phi_hat.iter().sum();
        let k = phi.ncols() as f64;
        let u = &self.ky_inv_y * phi; // K_y^{-1} s_k

        let mut out = Vec::new();
        for (name, g) in self.hypers.cluster.free_gram_grads(&design.times) {
            let mut v = 0.0;
            for (f, &w) in factors.iter().zip(&stats.phi_hat) {
                v += 0.5 * linalg::quad(&f.a, &g);
                if w > 0.0 {
                    v -= 0.5 * w * linalg::trace_solve(&f.chol, &g);
                }
            }
            out.push((format!("f.{name}"), v));
        }
        for (name, g) in self.hypers.structure.free_gram_grads(design) {
            // 1/2 tr(K_y^{-1} W K_y^{-1} G) with W the within-cluster scatter.
            let mut v = 0.0;
            for n in 0..self.data.n_groups() {
                let p = self.ky_inv_y.column(n).into_owned();
                v += 0.5 * row_mass[n] * linalg::quad(&p, &g);
            }
            for ((f, &w), j) in factors.iter().zip(&stats.phi_hat).zip(0..) {
                if w > 0.0 {
                    let p = u.column(j).into_owned();
                    v -= 0.5 * linalg::quad(&p, &g) / w;
                    v += 0.5 * linalg::quad(&f.a, &g) / w;
                    v -= 0.5 * linalg::trace_solve(&f.chol, &g);
                } else {
                    v -= 0.5 * linalg::trace_solve(&self.ky_chol, &g);
                }
            }
            v -= 0.5 * (total_mass - k) * linalg::trace_solve(&self.ky_chol, &g);
            out.push((name, v));
        }
        Ok(out)
    }
}

/// Upper limit on `K^N` for [`exact_log_marginal_small`].
pub const EXACT_LIMIT: f64 = 1e6;

/// Exact `ln p(Y)` under the model truncated at `K` clusters, by summing over
/// all `K^N` hard assignments. Each term uses the stacked hierarchical-GP
/// marginal of every cluster and the integer-count stick prior.
pub fn exact_log_marginal_small(
    data: &GroupedDataset,
    hypers: &Hypers,
    k: usize,
    alpha: f64,
) -> Result<f64> {
    let n = data.n_groups();
    let assignments = (k as f64).powi(n as i32);
    if k == 0 || assignments > EXACT_LIMIT {
        return Err(Error::TooLarge {
            assignments,
            limit: EXACT_LIMIT,
        });
    }
    let subset_marginal = subset_marginals(data, hypers)?;
    let mut labels = vec![0usize; n];
    let mut terms = Vec::with_capacity(assignments as usize);
    loop {
        terms.push(log_joint_of(&labels, k, alpha, &subset_marginal));
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == n {
                return Ok(linalg::logsumexp(terms.iter().copied()));
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Exact `ln p(Y, Z)` for one hard assignment.
pub fn exact_log_joint(
    data: &GroupedDataset,
    hypers: &Hypers,
    labels: &[usize],
    k: usize,
    alpha: f64,
) -> Result<f64> {
    let subset_marginal = subset_marginals(data, hypers)?;
    Ok(log_joint_of(labels, k, alpha, &subset_marginal))
}

fn log_joint_of(labels: &[usize], k: usize, alpha: f64, subset_marginal: &[f64]) -> f64 {
    let mut masks = vec![0usize; k];
    for (n, &l) in labels.iter().enumerate() {
        masks[l] |= 1 << n;
    }
    let counts: Vec<f64> = masks.iter().map(|m| m.count_ones() as f64).collect();
    let data: f64 = masks.iter().map(|&m| subset_marginal[m]).sum();
    data + stick_term(&counts, alpha)
}

/// `ln N(stack | 0, compound)` for every subset of groups (bitmask index).
fn subset_marginals(data: &GroupedDataset, hypers: &Hypers) -> Result<Vec<f64>> {
    let n = data.n_groups();
    if n > 20 {
        return Err(Error::TooLarge {
            assignments: 2f64.powi(n as i32),
            limit: EXACT_LIMIT,
        });
    }
    hypers.validate(data.design())?;
    let mut out = vec![0.0; 1 << n];
    for (mask, slot) in out.iter_mut().enumerate().skip(1) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let g = hgp::compound_gram(&hypers.cluster, &hypers.structure, data.design(), members.len());
        let y = DVector::from_iterator(
            members.len() * data.dim(),
            members.iter().flat_map(|&i| data.values().column(i).into_owned().data.as_vec().clone()),
        );
        *slot = hgp::log_marginal(&y, &g)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hgp::{Design, Layer, StructureSpec};
    use crate::kernels::KernelSpec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (GroupedDataset, Hypers) {
        let times: Vec<f64> = (0..d).map(|i| i as f64 / d as f64 + rng.random_range(0.0..0.05)).collect();
        let groups: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let names = (0..n).map(|i| format!("g{i}")).collect();
        let data = GroupedDataset::new(Design::flat(times), groups, names).unwrap();
        let hypers = Hypers {
            cluster: KernelSpec::squared_exponential(rng.random_range(0.5..1.5), rng.random_range(0.2..0.8)),
            structure: StructureSpec::new(vec![
                Layer::group(KernelSpec::squared_exponential(0.2, 0.3)),
                Layer::group(KernelSpec::white_noise(rng.random_range(0.05..0.3))),
            ]),
        };
        (data, hypers)
    }

    fn random_phi(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
        softmax_rows(&DMatrix::from_fn(n, k, |_, _| rng.random_range(-2.0..2.0)))
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 0.0]));
        for v in p.iter() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let a = softmax_rows(&DMatrix::from_row_slice(1, 2, &[0.3, -1.2]));
        let b = softmax_rows(&DMatrix::from_row_slice(1, 2, &[100.3, 98.8]));
        assert_relative_eq!(a, b, epsilon = 1e-14);
        let p = softmax_rows(&DMatrix::from_row_slice(1, 2, &[1000.0, 0.0]));
        assert_eq!(p[(0, 0)], 1.0);
        assert!(p[(0, 1)] >= 0.0 && p[(0, 1)] < 1e-300);
    }

    #[test]
    fn suff_stats_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (data, _) = small_problem(&mut rng, 5, 3);
        let phi = random_phi(&mut rng, 5, 4);
        let st = SuffStats::new(&data, &phi);
        assert_relative_eq!(st.phi_hat.iter().sum::<f64>(), 5.0, epsilon = 1e-9);
        assert_eq!(st.phi_tilde[3], 0.0);
        for k in 0..3 {
            assert_relative_eq!(st.phi_tilde[k], st.phi_tilde[k + 1] + st.phi_hat[k + 1], epsilon = 1e-14);
        }
    }

    #[test]
    fn stick_term_examples() {
        assert_eq!(stick_term(&[0.0, 0.0, 0.0], 2.5), 0.0);
        assert_relative_eq!(stick_term(&[3.0], 1.0), -(4f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn stick_grad_matches_finite_differences() {
        let hat = [2.3, 0.4, 1.7, 0.05];
        let g = stick_grad(&hat, 1.3);
        for j in 0..hat.len() {
            let mut p = hat;
            let mut m = hat;
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (stick_term(&p, 1.3) - stick_term(&m, 1.3)) / 2e-6;
            assert_relative_eq!(g[j], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn entropy_examples() {
        let one_hot = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(entropy(&one_hot), 0.0);
        assert_relative_eq!(entropy(&DMatrix::from_element(1, 4, 0.25)), 4f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(entropy(&DMatrix::from_element(2, 2, 0.5)), 2.0 * 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn single_group_single_cluster_is_gp_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (data, hypers) = small_problem(&mut rng, 1, 4);
        let obj = Objective::new(&data, hypers.clone(), 1.0).unwrap();
        let phi = DMatrix::from_element(1, 1, 1.0);
        let (dt, posts) = obj.data_term(&phi).unwrap();
        let k = hgp::compound_gram(&hypers.cluster, &hypers.structure, data.design(), 1);
        assert_relative_eq!(dt, hgp::log_marginal(&data.group(0), &k).unwrap(), epsilon = 1e-10);
        assert_eq!(posts.len(), 1);
    }

    #[test]
    fn empty_cluster_contributes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (data, hypers) = small_problem(&mut rng, 3, 3);
        let obj = Objective::new(&data, hypers.clone(), 1.0).unwrap();
        let phi2 = random_phi(&mut rng, 3, 2);
        let mut phi3 = DMatrix::zeros(3, 3);
        phi3.columns_mut(0, 2).copy_from(&phi2);
        let (a, _) = obj.data_term(&phi2).unwrap();
        let (b, posts) = obj.data_term(&phi3).unwrap();
        assert_eq!(a, b);
        assert_eq!(posts[2].mean, DVector::zeros(3));
        assert_eq!(posts[2].cov, hypers.cluster.matrix(&data.design().times));
    }

    #[test]
    fn k1_breakdown_is_hand_assembled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (data, hypers) = small_problem(&mut rng, 3, 2);
        let obj = Objective::new(&data, hypers.clone(), 0.7).unwrap();
        let bd = obj.bound_phi(&DMatrix::from_element(3, 1, 1.0)).unwrap();
        assert_eq!(bd.entropy_term, 0.0);
        let stick = ln_gamma(4.0) + ln_gamma(0.7) + 0.7f64.ln() - ln_gamma(3.0 + 0.7 + 1.0);
        assert_relative_eq!(bd.stick_term, stick, epsilon = 1e-12);
        let k = hgp::compound_gram(&hypers.cluster, &hypers.structure, data.design(), 3);
        let y = DVector::from_iterator(6, data.values().iter().copied());
        assert_relative_eq!(bd.data_term, hgp::log_marginal(&y, &k).unwrap(), epsilon = 1e-10);
        assert_relative_eq!(bd.total, bd.data_term + bd.stick_term + bd.entropy_term, epsilon = 1e-10);
    }

    #[test]
    fn hard_assignment_equals_exact_joint_and_bound_is_below_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (data, hypers) = small_problem(&mut rng, 4, 3);
            let obj = Objective::new(&data, hypers.clone(), 1.0).unwrap();
            let exact = exact_log_marginal_small(&data, &hypers, 3, 1.0).unwrap();
            for _ in 0..5 {
                let phi = random_phi(&mut rng, 4, 3);
                assert!(obj.bound_phi(&phi).unwrap().total <= exact + 1e-9);
                let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
                let hard = DMatrix::from_fn(4, 3, |n, k| (labels[n] == k) as u8 as f64);
                let joint = exact_log_joint(&data, &hypers, &labels, 3, 1.0).unwrap();
                assert_relative_eq!(obj.bound_phi(&hard).unwrap().total, joint, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn exact_marginal_single_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (data, hypers) = small_problem(&mut rng, 1, 3);
        let k = hgp::compound_gram(&hypers.cluster, &hypers.structure, data.design(), 1);
        let expect = hgp::log_marginal(&data.group(0), &k).unwrap() - 2f64.ln();
        let got = exact_log_marginal_small(&data, &hypers, 1, 1.0).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
        assert!(matches!(
            exact_log_marginal_small(&data, &hypers, 2_000_000, 1.0),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn data_term_permutation_invariant_stick_term_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (data, hypers) = small_problem(&mut rng, 5, 3);
        let obj = Objective::new(&data, hypers, 1.0).unwrap();
        let phi = random_phi(&mut rng, 5, 3);
        let perm = [2usize, 0, 1];
        let phi_p = DMatrix::from_fn(5, 3, |n, k| phi[(n, perm[k])]);
        let a = obj.bound_phi(&phi).unwrap();
        let b = obj.bound_phi(&phi_p).unwrap();
        assert_relative_eq!(a.data_term, b.data_term, epsilon = 1e-12);
        assert_relative_eq!(a.entropy_term, b.entropy_term, epsilon = 1e-12);
        assert!((a.stick_term - b.stick_term).abs() > 1e-9);
    }

    #[test]
    fn grad_phi_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let (data, hypers) = small_problem(&mut rng, 4, 3);
            let obj = Objective::new(&data, hypers, 1.3).unwrap();
            let phi = random_phi(&mut rng, 4, 3);
            let g = obj.grad_phi(&phi).unwrap();
            let h = 1e-6;
            for n in 0..4 {
                for k in 0..3 {
                    let mut p = phi.clone();
                    let mut m = phi.clone();
                    p[(n, k)] += h;
                    m[(n, k)] -= h;
                    let fd = (obj.bound_phi(&p).unwrap().total - obj.bound_phi(&m).unwrap().total) / (2.0 * h);
                    assert!((g[(n, k)] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{} vs {fd}", g[(n, k)]);
                }
            }
        }
    }

    #[test]
    fn grad_hypers_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let (data, hypers) = small_problem(&mut rng, 4, 3);
            let obj = Objective::new(&data, hypers.clone(), 1.0).unwrap();
            let phi = random_phi(&mut rng, 4, 3);
            let g = obj.grad_hypers_phi(&phi).unwrap();
            let theta = hypers.free_log_params();
            assert_eq!(g.len(), theta.len());
            for (j, (name, gj)) in g.iter().enumerate() {
                let h = 1e-5;
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[j] += h;
                tm[j] -= h;
                let fp = obj.with_hypers(hypers.with_free_log_params(&tp)).unwrap().bound_phi(&phi).unwrap().total;
                let fm = obj.with_hypers(hypers.with_free_log_params(&tm)).unwrap().bound_phi(&phi).unwrap().total;
                let fd = (fp - fm) / (2.0 * h);
                assert!((gj - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{name}: {gj} vs {fd}");
            }
        }
    }

    #[test]
    fn identical_groups_have_identical_gradient_rows() {
        let design = Design::flat(vec![0.0, 0.5, 1.0]);
        let y = vec![0.3, -0.1, 0.5];
        let data = GroupedDataset::new(design, vec![y.clone(), y], vec!["a".into(), "b".into()]).unwrap();
        let hypers = Hypers {
            cluster: KernelSpec::squared_exponential(1.0, 0.5),
            structure: StructureSpec::iid(0.1),
        };
        let obj = Objective::new(&data, hypers, 1.0).unwrap();
        let phi = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.3, 0.7]);
        let g = obj.grad_phi(&phi).unwrap();
        assert_relative_eq!(g.row(0).into_owned(), g.row(1).into_owned(), epsilon = 1e-12);
    }
}
