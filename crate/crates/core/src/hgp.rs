//! Hierarchical Gaussian processes over grouped data.
//!
//! Every group in a dataset is observed on one shared [`Design`]: a vector of
//! time points plus, optionally, label sets such as a replicate id per point.
//! A cluster-level function `f ~ GP(0, k_f)` is shared by all groups of a
//! cluster; each group deviates from it by a draw from the within-group
//! covariance `K_y`, built from the [`StructureSpec`] layers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, KernelSpec};
use crate::linalg::{self, Chol};

/// Maximum number of layers below the cluster level.
pub const MAX_LAYERS: usize = 3;

/// Which pairs of points within a group a layer couples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// All points of the group (gene-level deviation).
    Group,
    /// Points sharing a label at design level `i` (e.g. replicate).
    Level(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kernel: KernelSpec,
    pub scope: Scope,
}

impl Layer {
    pub fn group(kernel: KernelSpec) -> Self {
        Layer {
            kernel,
            scope: Scope::Group,
        }
    }

    pub fn level(kernel: KernelSpec, level: usize) -> Self {
        Layer {
            kernel,
            scope: Scope::Level(level),
        }
    }
}

/// The layers that make up the within-group covariance `K_y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub layers: Vec<Layer>,
}

/// One label set over the design points, e.g. the replicate of each point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLevel {
    pub name: String,
    pub labels: Vec<String>,
    /// Index into `labels` for every design point.
    pub ids: Vec<usize>,
}

/// The per-group sampling layout shared by every group of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub times: Vec<f64>,
    pub levels: Vec<DesignLevel>,
}

impl Design {
    /// A design with no sub-group labels.
    pub fn flat(times: Vec<f64>) -> Self {
        Design {
            times,
            levels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::InvalidData("design has no points".into()));
        }
        if let Some(t) = self.times.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite design time {t}")));
        }
        for level in &self.levels {
            if level.ids.len() != self.times.len() {
                return Err(Error::InvalidData(format!(
                    "level {} labels {} points, design has {}",
                    level.name,
                    level.ids.len(),
                    self.times.len()
                )));
            }
            if level.ids.iter().any(|&i| i >= level.labels.len()) {
                return Err(Error::InvalidData(format!(
                    "level {} has an id without a label",
                    level.name
                )));
            }
        }
        Ok(())
    }

    fn coupled(&self, scope: Scope, i: usize, j: usize) -> bool {
        match scope {
            Scope::Group => true,
            Scope::Level(l) => self.levels[l].ids[i] == self.levels[l].ids[j],
        }
    }

    pub fn span(&self) -> f64 {
        let lo = self.times.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }
}

/// `N` groups of values observed on one shared design.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    design: Design,
    /// `D x N`, one column per group.
    values: DMatrix<f64>,
    names: Vec<String>,
}

impl GroupedDataset {
    pub fn new(design: Design, groups: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        design.validate()?;
        if groups.is_empty() {
            return Err(Error::InvalidData("dataset has no groups".into()));
        }
        if groups.len() != names.len() {
            return Err(Error::InvalidData(format!(
                "{} groups but {} names",
                groups.len(),
                names.len()
            )));
        }
        let d = design.len();
        for (g, name) in groups.iter().zip(&names) {
            if g.len() != d {
                return Err(Error::InvalidData(format!(
                    "group {name} has {} values, design has {d}",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("group {name} has non-finite values")));
            }
        }
        let values = DMatrix::from_fn(d, groups.len(), |i, n| groups[n][i]);
        Ok(GroupedDataset {
            design,
            values,
            names,
        })
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn n_groups(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// All values as a `D x N` matrix.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn group(&self, n: usize) -> DVector<f64> {
        self.values.column(n).into_owned()
    }

    /// Dataset restricted to the listed groups, in that order.
    pub fn subset(&self, idx: &[usize]) -> GroupedDataset {
        GroupedDataset {
            design: self.design.clone(),
            values: self.values.select_columns(idx),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
        }
    }
}

impl StructureSpec {
    pub fn new(layers: Vec<Layer>) -> Self {
        StructureSpec { layers }
    }

    /// Structure with white noise only (the non-hierarchical model).
    pub fn iid(noise: f64) -> Self {
        StructureSpec::new(vec![Layer::group(KernelSpec::white_noise(noise))])
    }

    pub fn validate(&self, design: &Design) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidStructure("structure needs at least one layer".into()));
        }
        if self.layers.len() > MAX_LAYERS {
            return Err(Error::InvalidStructure(format!(
                "{} layers given, at most {MAX_LAYERS} levels are supported",
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.kernel.validate()?;
            if let Scope::Level(l) = layer.scope {
                if l >= design.levels.len() {
                    return Err(Error::InvalidStructure(format!(
                        "layer {i} refers to design level {l}, design has {}",
                        design.levels.len()
                    )));
                }
            }
        }
        if !self.layers.iter().any(|l| l.kernel.has_white_noise()) {
            return Err(Error::InvalidStructure(
                "no white_noise layer: the within-group covariance would be singular".into(),
            ));
        }
        Ok(())
    }

    /// Within-group covariance `K_y` as a raw matrix.
    pub fn matrix(&self, design: &Design) -> DMatrix<f64> {
        let t = &design.times;
        let d = t.len();
        let mut m = DMatrix::zeros(d, d);
        for layer in &self.layers {
            for i in 0..d {
                for j in 0..=i {
                    if design.coupled(layer.scope, i, j) {
                        let v = layer.kernel.eval_pair(t[i], t[j], i == j);
                        m[(i, j)] += v;
                        if i != j {
                            m[(j, i)] += v;
                        }
                    }
                }
            }
        }
        m
    }

    /// Kernels of the group's own latent function: group-scoped layers that
    /// are not pure white noise.
    pub fn group_function_kernels(&self) -> impl Iterator<Item = &KernelSpec> {
        self.layers
            .iter()
            .filter(|l| l.scope == Scope::Group && !l.kernel.is_white_noise())
            .map(|l| &l.kernel)
    }

    fn group_function_cross(&self, a: &[f64], b: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(a.len(), b.len());
        for k in self.group_function_kernels() {
            m += k.cross(a, b);
        }
        m
    }

    fn group_function_matrix(&self, a: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(a.len(), a.len());
        for k in self.group_function_kernels() {
            m += k.matrix(a);
        }
        m
    }

    /// Free parameters as `(layer<i>.<name>, value)`.
    pub fn free_params(&self) -> Vec<(String, f64)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.kernel
                    .free_params()
                    .into_iter()
                    .map(move |(n, v)| (format!("layer{i}.{n}"), v))
            })
            .collect()
    }

    /// `dK_y / d(log theta)` for every free parameter.
    pub fn free_gram_grads(&self, design: &Design) -> Vec<(String, DMatrix<f64>)> {
        let d = design.len();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, mut g) in layer.kernel.free_gram_grads(&design.times) {
                for a in 0..d {
                    for b in 0..d {
                        if !design.coupled(layer.scope, a, b) {
                            g[(a, b)] = 0.0;
                        }
                    }
                }
                out.push((format!("layer{i}.{name}"), g));
            }
        }
        out
    }
}

/// Cluster-level kernel plus within-group structure: every hyperparameter
/// of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypers {
    pub cluster: KernelSpec,
    pub structure: StructureSpec,
}

impl Hypers {
    pub fn validate(&self, design: &Design) -> Result<()> {
        self.cluster.validate()?;
        self.structure.validate(design)
    }

    /// Free parameters in a fixed order: `f.*` then `layer<i>.*`.
    pub fn free_params(&self) -> Vec<(String, f64)> {
        let mut out: Vec<_> = self
            .cluster
            .free_params()
            .into_iter()
            .map(|(n, v)| (format!("f.{n}"), v))
            .collect();
        out.extend(self.structure.free_params());
        out
    }

    pub fn free_log_params(&self) -> Vec<f64> {
        self.free_params().into_iter().map(|(_, v)| v.ln()).collect()
    }

    pub fn with_free_log_params(&self, log_values: &[f64]) -> Hypers {
        let mut h = self.clone();
        let mut used = h.cluster.set_free_log_params(log_values);
        for layer in &mut h.structure.layers {
            used += layer.kernel.set_free_log_params(&log_values[used..]);
        }
        debug_assert_eq!(used, log_values.len());
        h
    }
}

/// Covariance of `n_groups` stacked copies of the design: `k_f` between every
/// pair of points, plus the structure layers between points of the same group.
/// Row `n * D + i` is point `i` of group `n`.
pub fn compound_gram(
    k_f: &KernelSpec,
    structure: &StructureSpec,
    design: &Design,
    n_groups: usize,
) -> GramMatrix {
    let d = design.len();
    let kf = k_f.matrix(&design.times);
    let ky = structure.matrix(design);
    let mut m = DMatrix::zeros(d * n_groups, d * n_groups);
    for a in 0..n_groups {
        for b in 0..n_groups {
            let mut block = m.view_mut((a * d, b * d), (d, d));
            if a == b {
                block.copy_from(&(&kf + &ky));
            } else {
                // Shared function only; white noise never crosses samples.
                block.copy_from(&k_f.cross(&design.times, &design.times));
            }
        }
    }
    GramMatrix {
        values: m,
        jitter: 0.0,
    }
}

/// The within-group covariance `K_y`.
pub fn group_cov(structure: &StructureSpec, design: &Design) -> Result<GramMatrix> {
    structure.validate(design)?;
    let values = structure.matrix(design);
    if nalgebra::Cholesky::new(values.clone()).is_none() {
        return Err(Error::NotPositiveDefinite {
            what: "within-group covariance".into(),
            jitter: 0.0,
        });
    }
    Ok(GramMatrix {
        values,
        jitter: 0.0,
    })
}

/// `log N(y | 0, K)` through a Cholesky factor.
pub fn log_marginal(y: &DVector<f64>, k: &GramMatrix) -> Result<f64> {
    if y.len() != k.dim() {
        return Err(Error::InvalidArgument(format!(
            "vector of length {} against {}x{} covariance",
            y.len(),
            k.dim(),
            k.dim()
        )));
    }
    let chol = nalgebra::Cholesky::new(k.values.clone()).ok_or_else(|| {
        Error::NotPositiveDefinite {
            what: "marginal likelihood covariance".into(),
            jitter: k.jitter,
        }
    })?;
    let alpha = chol.solve(y);
    Ok(-0.5 * y.dot(&alpha) - 0.5 * linalg::log_det(&chol) - 0.5 * y.len() as f64 * linalg::LN_2PI)
}

/// Below this effective count a cluster's posterior is the prior.
pub const EMPTY_WEIGHT: f64 = 1e-10;

/// Posterior over a latent function that generated data with weights
/// `phi_n`, summarized by `weight = sum_n phi_n` and
/// `weighted_sum = sum_n phi_n y_n`. The data act as one pseudo-observation
/// `weighted_sum / weight` with covariance `K_y / weight`, so everything runs
/// through a factor of `B = K_y + weight * K_f`; `K_f` itself may be singular
/// (replicates at shared times).
pub struct LatentPosterior<'a> {
    k_f: &'a KernelSpec,
    times: &'a [f64],
    kf: DMatrix<f64>,
    weight: f64,
    factor: Option<(Chol, DVector<f64>)>,
}

impl<'a> LatentPosterior<'a> {
    pub fn new(
        k_f: &'a KernelSpec,
        ky: &DMatrix<f64>,
        times: &'a [f64],
        weighted_sum: &DVector<f64>,
        weight: f64,
    ) -> Result<Self> {
        let kf = k_f.matrix(times);
        let factor = if weight > EMPTY_WEIGHT {
            let b = ky + &kf * weight;
            let (chol, _) = linalg::robust_cholesky(&b, "cluster posterior system")?;
            let a = chol.solve(weighted_sum);
            Some((chol, a))
        } else {
            None
        };
        Ok(LatentPosterior {
            k_f,
            times,
            kf,
            weight,
            factor,
        })
    }

    /// Posterior given a stack of fully assigned observation vectors.
    pub fn from_members(
        k_f: &'a KernelSpec,
        ky: &DMatrix<f64>,
        times: &'a [f64],
        members: &[DVector<f64>],
    ) -> Result<Self> {
        let mut sum = DVector::zeros(times.len());
        for y in members {
            sum += y;
        }
        Self::new(k_f, ky, times, &sum, members.len() as f64)
    }

    fn prior_cross(&self, x: &[f64], y: &[f64], same: bool) -> DMatrix<f64> {
        if same {
            self.k_f.matrix(x)
        } else {
            self.k_f.cross(x, y)
        }
    }

    /// Posterior mean at `x`; `x = None` means the design points.
    fn mean_at(&self, x: Option<&[f64]>) -> DVector<f64> {
        let n = x.map_or(self.times.len(), |g| g.len());
        match &self.factor {
            None => DVector::zeros(n),
            Some((_, a)) => match x {
                None => &self.kf * a,
                Some(g) => self.k_f.cross(g, self.times) * a,
            },
        }
    }

    /// Posterior covariance between `x` and `y` (`None` = design points).
    fn cov_between(&self, x: Option<&[f64]>, y: Option<&[f64]>) -> DMatrix<f64> {
        let kx = match x {
            None => self.kf.clone(),
            Some(g) => self.k_f.cross(g, self.times),
        };
        let prior = match (x, y) {
            (None, None) => self.kf.clone(),
            (Some(_), None) => kx.clone(),
            (None, Some(h)) => self.k_f.cross(self.times, h),
            (Some(g), Some(h)) => self.prior_cross(g, h, std::ptr::eq(g, h)),
        };
        match &self.factor {
            None => prior,
            Some((chol, _)) => {
                let ky_t = match y {
                    None => self.kf.clone(),
                    Some(h) => self.k_f.cross(self.times, h),
                };
                prior - (kx * chol.solve(&ky_t)) * self.weight
            }
        }
    }

    /// Mean and covariance on the design points.
    pub fn on_design(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mut cov = self.cov_between(None, None);
        linalg::symmetrize(&mut cov);
        (self.mean_at(None), cov)
    }

    /// Mean and covariance on an arbitrary grid.
    pub fn on_grid(&self, grid: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let mut cov = self.cov_between(Some(grid), Some(grid));
        linalg::symmetrize(&mut cov);
        (self.mean_at(Some(grid)), cov)
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }
}

/// Posterior of a latent function `f ~ GP(0, k_f)` on `grid`, given
/// observation vectors `y_stack` each distributed `N(f(t), K_y)`.
pub fn posterior_latent(
    y_stack: &[DVector<f64>],
    k_f: &KernelSpec,
    k_y: &GramMatrix,
    times: &[f64],
    grid: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if let Some(y) = y_stack.iter().find(|y| y.len() != times.len()) {
        return Err(Error::InvalidArgument(format!(
            "observation of length {} against {} design points",
            y.len(),
            times.len()
        )));
    }
    let post = LatentPosterior::from_members(k_f, &k_y.values, times, y_stack)?;
    Ok(post.on_grid(grid))
}

/// Predictive distribution of a not-yet-observed group's own function in a
/// cluster: the cluster posterior plus the group-level prior covariance.
pub fn predict_new_group(
    posterior: &LatentPosterior<'_>,
    structure: &StructureSpec,
    grid: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let (mean, cov) = posterior.on_grid(grid);
    (mean, cov + structure.group_function_matrix(grid))
}

/// Predictive distribution of an observed group's own function `f + g_n`
/// on `grid`, conditioning on its data `y` and on the cluster posterior
/// (which already accounts for every group assigned to the cluster).
pub fn predict_group(
    posterior: &LatentPosterior<'_>,
    structure: &StructureSpec,
    design: &Design,
    y: &DVector<f64>,
    grid: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let times = &design.times;
    if y.len() != times.len() {
        return Err(Error::InvalidArgument(format!(
            "group of length {} against {} design points",
            y.len(),
            times.len()
        )));
    }
    let ky = structure.matrix(design);
    let (ky_chol, _) = linalg::robust_cholesky(&ky, "within-group covariance")?;
    // Regression of the group deviation on the residual y - f.
    let kg_t_grid = structure.group_function_cross(times, grid);
    let a_t = ky_chol.solve(&kg_t_grid); // D x G, equals A^T
    let a = a_t.transpose();

    let m_grid = posterior.mean_at(Some(grid));
    let m_design = posterior.mean_at(None);
    let s_gg = posterior.cov_between(Some(grid), Some(grid));
    let s_gd = posterior.cov_between(Some(grid), None);
    let s_dd = posterior.cov_between(None, None);

    let mean = m_grid - &a * m_design + &a * y;
    let a_sdg = &a * s_gd.transpose();
    let mut cov = s_gg - &a_sdg - a_sdg.transpose() + &a * s_dd * &a_t
        + structure.group_function_matrix(grid)
        - &a * kg_t_grid;
    linalg::symmetrize(&mut cov);
    Ok((mean, cov))
}
