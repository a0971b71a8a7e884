//! Parametric covariance functions.
//!
//! Parameters are stored in natural units and differentiated in log space,
//! so every gradient returned here is `dK / d(log theta)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_DEPTH: usize = 8;

/// A covariance function together with its (strictly positive) parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `variance * exp(-(t - t')^2 / (2 lengthscale^2))`
    SquaredExponential { variance: f64, lengthscale: f64 },
    /// `noise` on the diagonal, zero elsewhere. Identity is decided by sample
    /// index when building matrices, so replicates at one clock time get
    /// independent noise.
    WhiteNoise { noise: f64 },
    /// `variance * exp(-2 sin^2(pi (t - t') / period) / lengthscale^2)`.
    /// The period is a fixed setting and is not re-estimated.
    Periodic {
        variance: f64,
        lengthscale: f64,
        period: f64,
    },
    Sum { children: Vec<KernelSpec> },
}

impl KernelSpec {
    pub fn squared_exponential(variance: f64, lengthscale: f64) -> Self {
        KernelSpec::SquaredExponential {
            variance,
            lengthscale,
        }
    }

    pub fn white_noise(noise: f64) -> Self {
        KernelSpec::WhiteNoise { noise }
    }

    pub fn periodic(variance: f64, lengthscale: f64, period: f64) -> Self {
        KernelSpec::Periodic {
            variance,
            lengthscale,
            period,
        }
    }

    pub fn sum(children: Vec<KernelSpec>) -> Self {
        KernelSpec::Sum { children }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            KernelSpec::SquaredExponential { .. } => "squared_exponential",
            KernelSpec::WhiteNoise { .. } => "white_noise",
            KernelSpec::Periodic { .. } => "periodic",
            KernelSpec::Sum { .. } => "sum",
        }
    }

    /// Parameter names a kind accepts, in canonical order.
    pub fn param_names(kind: &str) -> Option<&'static [&'static str]> {
        match kind {
            "squared_exponential" => Some(&["variance", "lengthscale"]),
            "white_noise" => Some(&["noise"]),
            "periodic" => Some(&["variance", "lengthscale", "period"]),
            "sum" => Some(&[]),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at(0)
    }

    fn validate_at(&self, depth: usize) -> Result<()> {
        if depth > MAX_DEPTH {
            return Err(Error::InvalidKernel(format!(
                "sum kernels nested deeper than {MAX_DEPTH}"
            )));
        }
        if let KernelSpec::Sum { children } = self {
            if children.len() < 2 {
                return Err(Error::InvalidKernel(
                    "sum kernel needs at least two children".into(),
                ));
            }
            return children.iter().try_for_each(|c| c.validate_at(depth + 1));
        }
        for (name, value) in self.params() {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidKernel(format!(
                    "{} parameter {name} = {value} must be finite and > 0",
                    self.kind_name()
                )));
            }
        }
        Ok(())
    }

    /// True if a white-noise term appears anywhere in this kernel.
    pub fn has_white_noise(&self) -> bool {
        match self {
            KernelSpec::WhiteNoise { .. } => true,
            KernelSpec::Sum { children } => children.iter().any(|c| c.has_white_noise()),
            _ => false,
        }
    }

    /// True if the kernel is nothing but white noise.
    pub fn is_white_noise(&self) -> bool {
        match self {
            KernelSpec::WhiteNoise { .. } => true,
            KernelSpec::Sum { children } => children.iter().all(|c| c.is_white_noise()),
            _ => false,
        }
    }

    /// All parameters as `(path, value)`; children of a sum are prefixed
    /// with their index, e.g. `1.lengthscale`.
    pub fn params(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out, true);
        out
    }

    /// Parameters subject to estimation (everything except periods).
    pub fn free_params(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out, false);
        out
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, f64)>, with_fixed: bool) {
        let name = |p: &str| format!("{prefix}{p}");
        match self {
            KernelSpec::SquaredExponential {
                variance,
                lengthscale,
            } => {
                out.push((name("variance"), *variance));
                out.push((name("lengthscale"), *lengthscale));
            }
            KernelSpec::WhiteNoise { noise } => out.push((name("noise"), *noise)),
            KernelSpec::Periodic {
                variance,
                lengthscale,
                period,
            } => {
                out.push((name("variance"), *variance));
                out.push((name("lengthscale"), *lengthscale));
                if with_fixed {
                    out.push((name("period"), *period));
                }
            }
            KernelSpec::Sum { children } => {
                for (i, c) in children.iter().enumerate() {
                    c.collect_params(&format!("{prefix}{i}."), out, with_fixed);
                }
            }
        }
    }

    /// Overwrites the free parameters from log values, consuming them in
    /// [`free_params`](Self::free_params) order. Returns how many were used.
    pub fn set_free_log_params(&mut self, log_values: &[f64]) -> usize {
        let mut used = 0;
        self.visit_free_mut(&mut |p| {
            *p = log_values[used].exp();
            used += 1;
        });
        used
    }

    fn visit_free_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        match self {
            KernelSpec::SquaredExponential {
                variance,
                lengthscale,
            } => {
                f(variance);
                f(lengthscale);
            }
            KernelSpec::WhiteNoise { noise } => f(noise),
            KernelSpec::Periodic {
                variance,
                lengthscale,
                ..
            } => {
                f(variance);
                f(lengthscale);
            }
            KernelSpec::Sum { children } => children.iter_mut().for_each(|c| c.visit_free_mut(f)),
        }
    }

    /// Applies `f(kind, name, value)` to every parameter, in `params()` order.
    pub fn map_params(&mut self, f: &mut dyn FnMut(&str, &str, &mut f64)) {
        match self {
            KernelSpec::SquaredExponential {
                variance,
                lengthscale,
            } => {
                f("squared_exponential", "variance", variance);
                f("squared_exponential", "lengthscale", lengthscale);
            }
            KernelSpec::WhiteNoise { noise } => f("white_noise", "noise", noise),
            KernelSpec::Periodic {
                variance,
                lengthscale,
                period,
            } => {
                f("periodic", "variance", variance);
                f("periodic", "lengthscale", lengthscale);
                f("periodic", "period", period);
            }
            KernelSpec::Sum { children } => children.iter_mut().for_each(|c| c.map_params(f)),
        }
    }

    /// Kernel value for two inputs. White noise fires on exact equality of
    /// `t` and `t2`; matrix builders use [`eval_pair`](Self::eval_pair) with
    /// index identity instead.
    pub fn eval(&self, t: f64, t2: f64) -> f64 {
        self.eval_pair(t, t2, t == t2)
    }

    /// Kernel value where `same_point` says whether both inputs are the same
    /// sample.
    pub fn eval_pair(&self, t: f64, t2: f64, same_point: bool) -> f64 {
        match self {
            KernelSpec::SquaredExponential {
                variance,
                lengthscale,
            } => {
                let r = t - t2;
                variance * (-0.5 * r * r / (lengthscale * lengthscale)).exp()
            }
            KernelSpec::WhiteNoise { noise } => {
                if same_point {
                    *noise
                } else {
                    0.0
                }
            }
            KernelSpec::Periodic {
                variance,
                lengthscale,
                period,
            } => {
                let s = (PI * (t - t2) / period).sin();
                variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp()
            }
            KernelSpec::Sum { children } => children
                .iter()
                .map(|c| c.eval_pair(t, t2, same_point))
                .sum(),
        }
    }

    /// Covariance matrix over `times` without jitter or factorization checks.
    pub fn matrix(&self, times: &[f64]) -> DMatrix<f64> {
        let n = times.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval_pair(times[i], times[j], i == j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Cross-covariance between two disjoint sample sets (white noise
    /// contributes nothing).
    pub fn cross(&self, a: &[f64], b: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval_pair(a[i], b[j], false))
    }

    /// Gram matrix with `jitter` on the diagonal, checked to be positive
    /// definite.
    pub fn gram(&self, times: &[f64], jitter: f64) -> Result<GramMatrix> {
        self.validate()?;
        if times.is_empty() {
            return Err(Error::InvalidArgument("gram needs at least one input".into()));
        }
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(Error::InvalidArgument(format!("jitter {jitter} must be >= 0")));
        }
        let mut values = self.matrix(times);
        for i in 0..times.len() {
            values[(i, i)] += jitter;
        }
        if nalgebra::Cholesky::new(values.clone()).is_none() {
            return Err(Error::NotPositiveDefinite {
                what: format!("gram matrix of {self:?}"),
                jitter,
            });
        }
        Ok(GramMatrix { values, jitter })
    }

    /// `dK / d(log theta_j)` for every parameter (including fixed periods),
    /// in [`params`](Self::params) order.
    pub fn gram_grads(&self, times: &[f64]) -> Vec<(String, DMatrix<f64>)> {
        let mut out = Vec::new();
        self.collect_grads("", times, &mut out, true);
        out
    }

    /// As [`gram_grads`](Self::gram_grads) but restricted to free parameters.
    pub fn free_gram_grads(&self, times: &[f64]) -> Vec<(String, DMatrix<f64>)> {
        let mut out = Vec::new();
        self.collect_grads("", times, &mut out, false);
        out
    }

    fn collect_grads(
        &self,
        prefix: &str,
        times: &[f64],
        out: &mut Vec<(String, DMatrix<f64>)>,
        with_fixed: bool,
    ) {
        let n = times.len();
        let name = |p: &str| format!("{prefix}{p}");
        match self {
            KernelSpec::SquaredExponential { lengthscale, .. } => {
                let k = self.matrix(times);
                let l2 = lengthscale * lengthscale;
                let dl = DMatrix::from_fn(n, n, |i, j| {
                    let r = times[i] - times[j];
                    k[(i, j)] * r * r / l2
                });
                out.push((name("variance"), k));
                out.push((name("lengthscale"), dl));
            }
            KernelSpec::WhiteNoise { noise } => {
                out.push((name("noise"), DMatrix::identity(n, n) * *noise));
            }
            KernelSpec::Periodic {
                lengthscale,
                period,
                ..
            } => {
                let k = self.matrix(times);
                let l2 = lengthscale * lengthscale;
                let dl = DMatrix::from_fn(n, n, |i, j| {
                    let s = (PI * (times[i] - times[j]) / period).sin();
                    k[(i, j)] * 4.0 * s * s / l2
                });
                let dp = DMatrix::from_fn(n, n, |i, j| {
                    let u = PI * (times[i] - times[j]) / period;
                    k[(i, j)] * 2.0 * u * (2.0 * u).sin() / l2
                });
                out.push((name("variance"), k));
                out.push((name("lengthscale"), dl));
                if with_fixed {
                    out.push((name("period"), dp));
                }
            }
            KernelSpec::Sum { children } => {
                for (i, c) in children.iter().enumerate() {
                    c.collect_grads(&format!("{prefix}{i}."), times, out, with_fixed);
                }
            }
        }
    }
}

/// A symmetric covariance matrix and the jitter already added to its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub jitter: f64,
}

impl GramMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(rng: &mut ChaCha8Rng) -> KernelSpec {
        let choice = rng.random_range(0..4);
        let mut pos = || rng.random_range(0.2..2.0);
        match choice {
            0 => KernelSpec::squared_exponential(pos(), pos()),
            1 => KernelSpec::periodic(pos(), pos(), pos() + 0.5),
            2 => KernelSpec::sum(vec![
                KernelSpec::squared_exponential(pos(), pos()),
                KernelSpec::white_noise(pos()),
            ]),
            _ => KernelSpec::sum(vec![
                KernelSpec::periodic(pos(), pos(), 1.3),
                KernelSpec::squared_exponential(pos(), pos()),
            ]),
        }
    }

    fn with_log_param(spec: &KernelSpec, idx: usize, delta: f64) -> KernelSpec {
        let mut s = spec.clone();
        let mut i = 0;
        s.map_params(&mut |_, _, v| {
            if i == idx {
                *v = (v.ln() + delta).exp();
            }
            i += 1;
        });
        s
    }

    #[test]
    fn se_values() {
        let k = KernelSpec::squared_exponential(2.0, 0.5);
        assert_eq!(k.eval(0.3, 0.3), 2.0);
        let k = KernelSpec::squared_exponential(1.0, 1.0);
        assert_relative_eq!(k.eval(0.0, 1.0), 0.606_530_659_712_633, epsilon = 1e-12);
    }

    #[test]
    fn white_noise_off_diagonal_is_zero() {
        let k = KernelSpec::white_noise(0.1);
        assert_eq!(k.eval(0.0, 0.5), 0.0);
        assert_eq!(k.eval(0.5, 0.5), 0.1);
        // Same clock time, different samples.
        let m = k.matrix(&[0.5, 0.5]);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(0, 0)], 0.1);
    }

    #[test]
    fn single_point_gram() {
        let g = KernelSpec::squared_exponential(1.5, 1.0)
            .gram(&[0.0], 0.0)
            .unwrap();
        assert_eq!(g.values, DMatrix::from_element(1, 1, 1.5));
    }

    #[test]
    fn long_lengthscale_gives_constant_matrix() {
        let g = KernelSpec::squared_exponential(0.7, 1e6)
            .matrix(&[0.0, 0.4, 1.0]);
        for v in g.iter() {
            assert_relative_eq!(*v, 0.7, epsilon = 1e-9);
        }
    }

    #[test]
    fn random_grid_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let spec = random_spec(&mut rng);
            let times: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
            let m = spec.matrix(&times);
            assert_relative_eq!(m.clone(), m.transpose(), epsilon = 1e-12);
            let eig = nalgebra::SymmetricEigen::new(m).eigenvalues;
            assert!(eig.min() >= -1e-10, "min eigenvalue {}", eig.min());
            assert!(spec.gram(&times, 1e-8).is_ok());
        }
    }

    #[test]
    fn gram_rejects_empty_and_invalid() {
        let k = KernelSpec::squared_exponential(1.0, 1.0);
        assert!(k.gram(&[], 0.0).is_err());
        assert!(KernelSpec::squared_exponential(-1.0, 1.0).validate().is_err());
        assert!(KernelSpec::sum(vec![KernelSpec::white_noise(1.0)]).validate().is_err());
        // Two identical points and no jitter: singular.
        assert!(matches!(
            k.gram(&[0.2, 0.2], 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn log_variance_gradient_is_kernel_itself() {
        let k = KernelSpec::squared_exponential(1.7, 0.3);
        let times = [0.0, 0.1, 0.5];
        let grads = k.gram_grads(&times);
        assert_eq!(grads[0].0, "variance");
        assert_relative_eq!(grads[0].1, k.matrix(&times), epsilon = 1e-14);
        // Diagonal does not depend on the lengthscale.
        for i in 0..3 {
            assert_eq!(grads[1].1[(i, i)], 0.0);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..20 {
            let spec = random_spec(&mut rng);
            let times: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0)).collect();
            let grads = spec.gram_grads(&times);
            assert_eq!(grads.len(), spec.params().len());
            for (idx, (name, g)) in grads.iter().enumerate() {
                let plus = with_log_param(&spec, idx, h).matrix(&times);
                let minus = with_log_param(&spec, idx, -h).matrix(&times);
                let fd = (plus - minus) / (2.0 * h);
                let scale = fd.amax().max(1e-8);
                assert!(
                    (g - &fd).amax() / scale < 1e-6,
                    "{name}: analytic {g} fd {fd}"
                );
            }
        }
    }

    #[test]
    fn free_params_skip_period() {
        let k = KernelSpec::sum(vec![
            KernelSpec::periodic(1.0, 0.5, 24.0),
            KernelSpec::white_noise(0.1),
        ]);
        let names: Vec<_> = k.free_params().into_iter().map(|p| p.0).collect();
        assert_eq!(names, ["0.variance", "0.lengthscale", "1.noise"]);
        let mut k2 = k.clone();
        let used = k2.set_free_log_params(&[0.0, 0.0, 0.0]);
        assert_eq!(used, 3);
        assert_eq!(k2.params()[2], ("0.period".to_string(), 24.0));
        assert_eq!(k2.params()[0].1, 1.0);
        assert_eq!(k2.params()[3].1, 1.0);
    }

    proptest! {
        #[test]
        fn eval_is_symmetric(a in -5.0f64..5.0, b in -5.0f64..5.0,
                             v in 0.1f64..3.0, l in 0.1f64..3.0, p in 0.5f64..4.0) {
            for k in [KernelSpec::squared_exponential(v, l), KernelSpec::periodic(v, l, p),
                      KernelSpec::white_noise(v)] {
                prop_assert_eq!(k.eval(a, b), k.eval(b, a));
            }
        }

        #[test]
        fn periodic_shift_invariance(a in -5.0f64..5.0, b in -5.0f64..5.0,
                                     l in 0.1f64..3.0, p in 0.5f64..4.0) {
            let k = KernelSpec::periodic(1.3, l, p);
            prop_assert!((k.eval(a, b) - k.eval(a + p, b)).abs() < 1e-12);
        }
    }
}
