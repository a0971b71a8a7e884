mod common;

use common::*;
use hgpclust_core::bound::softmax_rows;
use hgpclust_core::optimizer::meanfield::meanfield_vbem_round;
use hgpclust_core::optimizer::{
    euclid_gamma_grad, fisher_matrix, hs_direction, natural_gradient, step_and_accept, RestartPolicy,
};
use hgpclust_core::{Objective, Responsibilities, StepKind};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn random_phi_and_grad(seed: u64, n: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng(seed);
    let phi = softmax_rows(&random_gamma(&mut r, n, k, 2.0));
    let grad = random_gamma(&mut r, n, k, 5.0);
    (phi, grad)
}

proptest! {
    #[test]
    fn euclidean_gamma_gradient_rows_sum_to_zero(seed in any::<u64>(), n in 1usize..8, k in 1usize..7) {
        let (phi, grad) = random_phi_and_grad(seed, n, k);
        let e = euclid_gamma_grad(&phi, &grad);
        for row in e.row_iter() {
            prop_assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn natural_gradient_is_euclidean_over_phi(seed in any::<u64>(), n in 1usize..8, k in 1usize..7) {
        let (phi, grad) = random_phi_and_grad(seed, n, k);
        let e = euclid_gamma_grad(&phi, &grad);
        let nat = natural_gradient(&phi, &grad);
        let ratio = e.component_div(&phi);
        for (a, b) in nat.iter().zip(ratio.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn constant_gradient_rows_have_zero_natural_gradient(seed in any::<u64>(), n in 1usize..8, k in 1usize..7) {
        let mut r = rng(seed);
        let phi = softmax_rows(&random_gamma(&mut r, n, k, 2.0));
        let c: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let grad = DMatrix::from_fn(n, k, |i, _| c[i]);
        let nat = natural_gradient(&phi, &grad);
        prop_assert!(nat.amax() < 1e-12);
    }

    /// Fixing the last coordinate of `gamma` gives an invertible Fisher
    /// matrix; its natural gradient equals the stable form shifted so the
    /// last entry is zero.
    #[test]
    fn natural_gradient_matches_reduced_fisher_solve(seed in any::<u64>(), k in 2usize..=5) {
        let (phi, grad) = random_phi_and_grad(seed, 1, k);
        let row: Vec<f64> = phi.row(0).iter().copied().collect();
        let g = fisher_matrix(&row);
        let e = euclid_gamma_grad(&phi, &grad);
        let reduced = g.view((0, 0), (k - 1, k - 1)).into_owned();
        let rhs = DVector::from_fn(k - 1, |j, _| e[(0, j)]);
        let v = reduced.lu().solve(&rhs).unwrap();
        let nat = natural_gradient(&phi, &grad);
        for j in 0..k - 1 {
            let want = nat[(0, j)] - nat[(0, k - 1)];
            prop_assert!((v[j] - want).abs() < 1e-8, "{} vs {}", v[j], want);
        }
    }

    #[test]
    fn unit_natural_steps_never_decrease_the_bound(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..8);
        let k = r.random_range(1..4);
        let d = r.random_range(2..5);
        let data = random_data(&mut r, n, d);
        let obj = Objective::new(&data, random_hypers(&mut r), 1.0).unwrap();
        let mut resp = Responsibilities::from_gamma(random_gamma(&mut r, n, k, 2.0));
        let (mut current, mut grad) = obj.bound_and_grad(&resp).unwrap();
        for _ in 0..5 {
            let nat = natural_gradient(resp.phi(), &grad);
            let out = step_and_accept(&obj, &mut resp, &nat, &nat, current.total, StepKind::UnitNatural).unwrap();
            prop_assert!(out.breakdown.total >= current.total - 1e-9);
            current = out.breakdown;
            grad = out.grad_phi;
        }
    }
}

#[test]
fn euclidean_gamma_gradient_matches_central_differences() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (n, k) = (4, 3);
        let data = random_data(&mut r, n, 3);
        let obj = Objective::new(&data, random_hypers(&mut r), 1.3).unwrap();
        let gamma = random_gamma(&mut r, n, k, 1.5);
        let resp = Responsibilities::from_gamma(gamma.clone());
        let (_, grad) = obj.bound_and_grad(&resp).unwrap();
        let e = euclid_gamma_grad(resp.phi(), &grad);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..k {
                let mut up = gamma.clone();
                up[(i, j)] += h;
                let mut down = gamma.clone();
                down[(i, j)] -= h;
                let fd = (obj.bound(&Responsibilities::from_gamma(up)).unwrap().total
                    - obj.bound(&Responsibilities::from_gamma(down)).unwrap().total)
                    / (2.0 * h);
                assert!(
                    (fd - e[(i, j)]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "seed {seed} ({i},{j}): fd {fd} vs {}",
                    e[(i, j)]
                );
            }
        }
    }
}

#[test]
fn unit_natural_step_is_one_vbem_round() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let n = r.random_range(2..10);
        let k = r.random_range(1..5);
        let d = r.random_range(2..6);
        let data = random_data(&mut r, n, d);
        let hypers = random_hypers(&mut r);
        let alpha = r.random_range(0.5..3.0);
        let obj = Objective::new(&data, hypers.clone(), alpha).unwrap();
        let resp = Responsibilities::from_gamma(random_gamma(&mut r, n, k, 2.0));
        let (_, grad) = obj.bound_and_grad(&resp).unwrap();
        let nat = natural_gradient(resp.phi(), &grad);
        let stepped = softmax_rows(&(resp.gamma() + nat));
        let vbem = meanfield_vbem_round(&data, resp.phi(), &hypers, alpha).unwrap();
        let diff = (&stepped - &vbem).amax();
        assert!(diff < 1e-8, "seed {seed}: max difference {diff}");
    }
}

#[test]
fn hs_beta_matches_hand_arithmetic() {
    let mut r = rng(3);
    let m = |r: &mut rand_chacha::ChaCha8Rng| random_gamma(r, 3, 4, 1.0);
    let (nat, g, g_old, d_old) = (m(&mut r), m(&mut r), m(&mut r), m(&mut r));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..3 {
        for j in 0..4 {
            let y = g[(i, j)] - g_old[(i, j)];
            num += nat[(i, j)] * y;
            den += d_old[(i, j)] * y;
        }
    }
    let want = num / den;
    let policy = RestartPolicy { max_beta: None, ..Default::default() };
    let (d, beta) = hs_direction(&nat, &g, Some((&g_old, &d_old)), &policy);
    if want > 0.0 {
        assert!((beta - want).abs() < 1e-12);
        assert!((&d - (&nat + &d_old * want)).amax() < 1e-12);
    } else {
        assert_eq!(beta, 0.0);
        assert_eq!(d, nat);
    }
    let flipped = -&d_old;
    let (_, beta) = hs_direction(&nat, &g, Some((&g_old, &flipped)), &policy);
    assert!((beta - (-want).max(0.0)).abs() < 1e-12);
}
