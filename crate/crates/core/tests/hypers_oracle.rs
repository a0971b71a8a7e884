mod common;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use hgpclust_core::hypers::optimize_hypers;
use hgpclust_core::{Design, GroupedDataset, Hypers, KernelSpec, Objective, Responsibilities, StructureSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Negative GP log marginal likelihood under SE plus white noise, by dense
/// inverse and determinant, over `(ln variance, ln lengthscale, ln noise)`.
struct GpEvidence {
    t: Vec<f64>,
    y: DVector<f64>,
}

impl CostFunction for GpEvidence {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        let (v, l, b) = (p[0].exp(), p[1].exp(), p[2].exp());
        let d = self.t.len();
        let k = DMatrix::from_fn(d, d, |i, j| {
            let r = self.t[i] - self.t[j];
            v * (-0.5 * r * r / (l * l)).exp() + if i == j { b } else { 0.0 }
        });
        let inv = k.clone().try_inverse().unwrap();
        let quad = (self.y.transpose() * inv * &self.y)[(0, 0)];
        let logdet = k.determinant().ln();
        Ok(0.5 * quad + 0.5 * logdet + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

#[test]
fn single_group_ascent_reaches_the_gp_evidence_optimum() {
    let mut r = common::rng(8);
    let d = 15;
    let t = common::random_times(&mut r, d);
    let y: Vec<f64> = t.iter().map(|&x| (6.0 * x).sin() + r.random_range(-0.2..0.2)).collect();
    let data = GroupedDataset::new(Design::flat(t.clone()), vec![y.clone()], vec!["only".into()]).unwrap();
    let hypers = Hypers {
        cluster: KernelSpec::squared_exponential(0.6, 0.5),
        structure: StructureSpec::iid(0.1),
    };
    let obj = Objective::new(&data, hypers, 1.0).unwrap();
    let resp = Responsibilities::from_gamma(DMatrix::zeros(1, 1));
    let out = optimize_hypers(obj, &resp, 3000).unwrap();
    let ours = out.objective.hypers().free_log_params();

    let problem = GpEvidence { t, y: DVector::from_vec(y) };
    let start = vec![0.6f64.ln(), 0.5f64.ln(), 0.1f64.ln()];
    let simplex = (0..=3)
        .map(|i| {
            let mut p = start.clone();
            if i > 0 {
                p[i - 1] += 0.5;
            }
            p
        })
        .collect();
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-12).unwrap();
    let res = Executor::new(problem, solver)
        .configure(|s| s.max_iters(20_000))
        .run()
        .unwrap();
    let oracle = res.state.best_param.unwrap();
    for (a, b) in ours.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-3, "ours {ours:?}, oracle {oracle:?}");
    }
}
