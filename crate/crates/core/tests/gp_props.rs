mod common;

use common::*;
use gpmpc::gp::{gram, kernel_eval, Dataset, GpModel, KernelParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn fd_lml(params: &KernelParams, data: &Dataset, h: f64) -> Vec<f64> {
    let theta = params.to_log_vec();
    (0..theta.len())
        .map(|k| {
            let eval = |s: f64| {
                let mut t = theta.clone();
                t[k] += s * h;
                GpModel::fit(data.clone(), KernelParams::from_log_vec(&t))
                    .unwrap()
                    .log_marginal_likelihood()
            };
            (eval(1.0) - eval(-1.0)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn posterior_matches_explicit_inverse() {
    let mut r = rng(101);
    for _ in 0..50 {
        let n = r.random_range(1..=8);
        let d = r.random_range(1..=4);
        let data = random_data(&mut r, n, d);
        let params = random_params(&mut r, d);
        let model = GpModel::fit(data.clone(), params.clone()).unwrap();
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.5..2.5)).collect();
        let p = model.predict(&x).unwrap();
        let (mean, var) = explicit_posterior(&params, &data, &x);
        assert!((p.mean - mean).abs() < 1e-8, "{} vs {mean}", p.mean);
        assert!((p.variance - var).abs() < 1e-8, "{} vs {var}", p.variance);
    }
}

#[test]
fn lml_matches_dense_determinant() {
    let mut r = rng(102);
    for _ in 0..20 {
        let data = random_data(&mut r, 4, 2);
        let params = random_params(&mut r, 2);
        let model = GpModel::fit(data.clone(), params.clone()).unwrap();
        assert!((model.log_marginal_likelihood() - explicit_lml(&params, &data)).abs() < 1e-9);
    }
}

#[test]
fn lml_gradient_matches_finite_differences() {
    let mut r = rng(103);
    for _ in 0..20 {
        let data = random_data(&mut r, 6, 3);
        let params = random_params(&mut r, 3);
        let model = GpModel::fit(data.clone(), params.clone()).unwrap();
        let g = model.lml_gradient();
        let fd = fd_lml(&params, &data, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-2), "{g:?} vs {fd:?}");
        }
    }
}

#[test]
fn mean_jacobian_matches_finite_differences() {
    let mut r = rng(104);
    for _ in 0..20 {
        let data = random_data(&mut r, 5, 3);
        let model = GpModel::fit(data, random_params(&mut r, 3)).unwrap();
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let jac = model.mean_jacobian(&x).unwrap();
        for k in 0..3 {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (model.predict(&xp).unwrap().mean - model.predict(&xm).unwrap().mean) / (2.0 * h);
            assert!((jac[k] - fd).abs() < 1e-6, "dim {k}: {} vs {fd}", jac[k]);
        }
    }
}

#[test]
fn gradient_vanishes_at_grid_maximum() {
    // 1-D toy data; only the iso length scale is free, the rest is pinned.
    let x = DMatrix::<f64>::from_column_slice(7, 1, &[-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
    let y = DVector::from_fn(7, |i, _| (0.8 * x[(i, 0)]).sin());
    let data = Dataset::new(x, y).unwrap();
    let base = KernelParams {
        sigma_iso: 1.0,
        l_iso: 1.0,
        sigma_ard: 0.0,
        l_ard: vec![1.0],
        sigma_n: 0.1,
    };
    let lml_at = |ln_l: f64| {
        let mut p = base.clone();
        p.l_iso = ln_l.exp();
        GpModel::fit(data.clone(), p).unwrap().log_marginal_likelihood()
    };
    // Coarse grid then golden-section refinement.
    let grid: Vec<f64> = (0..=400).map(|i| -2.0 + 4.0 * i as f64 / 400.0).collect();
    let best = grid.iter().copied().max_by(|a, b| lml_at(*a).total_cmp(&lml_at(*b))).unwrap();
    let (mut lo, mut hi) = (best - 0.01, best + 0.01);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if lml_at(a) > lml_at(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let mut p = base.clone();
    p.l_iso = (0.5 * (lo + hi)).exp();
    let g = GpModel::fit(data, p).unwrap().lml_gradient();
    assert!(g[1].abs() < 1e-5, "d lml / d ln l_iso = {}", g[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_is_symmetric(seed in any::<u64>(), d in 1usize..5) {
        let mut r = rng(seed);
        let p = random_params(&mut r, d);
        let a: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        prop_assert_eq!(kernel_eval(&p, &a, &b), kernel_eval(&p, &b, &a));
        let data = random_data(&mut r, 6, d);
        let k = gram(&p, &data.x, &data.x);
        prop_assert_eq!(k.clone(), k.transpose());
    }

    #[test]
    fn variance_bounded_by_prior(seed in any::<u64>(), n in 1usize..9, d in 1usize..5) {
        let mut r = rng(seed);
        let data = random_data(&mut r, n, d);
        let p = random_params(&mut r, d);
        let model = GpModel::fit(data, p.clone()).unwrap();
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-4.0..4.0)).collect();
        let v = model.predict(&x).unwrap().variance;
        prop_assert!(v <= p.prior_variance() + 1e-10);
        prop_assert!(v >= -1e-10);
    }

    #[test]
    fn adding_a_point_never_raises_variance(seed in any::<u64>(), n in 1usize..8, d in 1usize..4) {
        let mut r = rng(seed);
        let data = random_data(&mut r, n + 1, d);
        let p = random_params(&mut r, d);
        let fewer = Dataset::new(data.x.rows(0, n).into_owned(), data.y.rows(0, n).into_owned()).unwrap();
        let small = GpModel::fit(fewer, p.clone()).unwrap();
        let big = GpModel::fit(data, p).unwrap();
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        prop_assert!(big.predict(&x).unwrap().variance <= small.predict(&x).unwrap().variance + 1e-10);
    }

    #[test]
    fn saved_model_predicts_identically(seed in any::<u64>()) {
        let mut r = rng(seed);
        let data = random_data(&mut r, 6, 3);
        let model = GpModel::fit_standardized(data, random_params(&mut r, 3)).unwrap();
        let back = GpModel::from_text(&model.to_text()).unwrap();
        let x = [0.3, -0.2, 1.1];
        prop_assert_eq!(model.predict(&x).unwrap(), back.predict(&x).unwrap());
        prop_assert_eq!(model.mean_jacobian(&x).unwrap(), back.mean_jacobian(&x).unwrap());
    }
}
