//! Independent oracles and random instance generators shared by the
//! integration tests.

#![allow(dead_code)]

use gpmpc::gp::{kernel_eval, Dataset, KernelParams};
use gpmpc::qp::{QpProblem, INF};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

pub fn random_params<R: Rng>(rng: &mut R, d: usize) -> KernelParams {
    KernelParams {
        sigma_iso: log_uniform(rng, 0.3, 2.0),
        l_iso: log_uniform(rng, 0.5, 3.0),
        sigma_ard: log_uniform(rng, 0.3, 2.0),
        l_ard: (0..d).map(|_| log_uniform(rng, 0.5, 3.0)).collect(),
        sigma_n: log_uniform(rng, 0.05, 0.5),
    }
}

pub fn random_data<R: Rng>(rng: &mut R, n: usize, d: usize) -> Dataset {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5));
    Dataset::new(x, y).unwrap()
}

/// Ky = K + σ_n² I built entry by entry from the kernel function.
pub fn dense_ky(params: &KernelParams, data: &Dataset) -> DMatrix<f64> {
    let n = data.n();
    DMatrix::from_fn(n, n, |i, j| {
        let k = kernel_eval(params, &data.row(i), &data.row(j));
        if i == j {
            k + params.sigma_n * params.sigma_n
        } else {
            k
        }
    })
}

/// Posterior mean and latent variance by explicit matrix inversion.
pub fn explicit_posterior(params: &KernelParams, data: &Dataset, x: &[f64]) -> (f64, f64) {
    let inv = dense_ky(params, data).try_inverse().expect("invertible");
    let ks = DVector::from_fn(data.n(), |i, _| kernel_eval(params, &data.row(i), x));
    let mean = (ks.transpose() * &inv * &data.y)[0];
    let var = kernel_eval(params, x, x) - (ks.transpose() * &inv * &ks)[0];
    (mean, var)
}

/// LML from a dense determinant and inverse.
pub fn explicit_lml(params: &KernelParams, data: &Dataset) -> f64 {
    let ky = dense_ky(params, data);
    let det = ky.clone().determinant();
    let inv = ky.try_inverse().unwrap();
    let n = data.n() as f64;
    -0.5 * (data.y.transpose() * inv * &data.y)[0] - 0.5 * det.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Random strictly convex QP with a known feasible point. Some bounds are
/// infinite, some one-sided, some equalities.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, m: usize) -> QpProblem {
    let mraw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = mraw.transpose() * &mraw + DMatrix::identity(n, n) * 0.2;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let az = &a * &z0;
    let mut lb = DVector::zeros(m);
    let mut ub = DVector::zeros(m);
    for i in 0..m {
        let kind: f64 = rng.random();
        let (w_lo, w_hi) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
        if kind < 0.1 {
            lb[i] = az[i];
            ub[i] = az[i];
        } else if kind < 0.3 {
            lb[i] = -INF;
            ub[i] = az[i] + w_hi;
        } else if kind < 0.5 {
            lb[i] = az[i] - w_lo;
            ub[i] = INF;
        } else {
            lb[i] = az[i] - w_lo;
            ub[i] = az[i] + w_hi;
        }
    }
    QpProblem { h, g, a, lb, ub }
}

pub fn max_violation(p: &QpProblem, z: &DVector<f64>) -> f64 {
    let az = &p.a * z;
    (0..p.n_cons()).fold(0.0, |m, i| m.max(p.lb[i] - az[i]).max(az[i] - p.ub[i]))
}

/// Optimal value via accelerated projected gradient ascent on the dual.
///
/// With `y_u, y_l >= 0` the dual is
/// `-1/2 w'H⁻¹w - ub'y_u + lb'y_l`, `w = g + A'(y_u - y_l)`, a smooth concave
/// function on the nonnegative orthant. Returns (dual value, recovered primal).
pub fn dual_projected_gradient(p: &QpProblem, max_iter: usize) -> (f64, DVector<f64>) {
    let m = p.n_cons();
    let hinv = p.h.clone().try_inverse().expect("H positive definite");
    let finite = |b: f64| b.abs() < INF * 0.5;
    // Step from the Lipschitz constant of the gradient, bounded by the
    // Frobenius norm of the stacked [A; -A] H⁻¹ [A; -A]'.
    let m_op = &p.a * &hinv * p.a.transpose();
    let lip = 2.0 * m_op.norm() + 1e-12;
    let step = 1.0 / lip;

    let value = |yu: &DVector<f64>, yl: &DVector<f64>| -> (f64, DVector<f64>) {
        let w = &p.g + p.a.transpose() * (yu - yl);
        let hw = &hinv * &w;
        let mut v = -0.5 * w.dot(&hw);
        for i in 0..m {
            if finite(p.ub[i]) {
                v -= p.ub[i] * yu[i];
            }
            if finite(p.lb[i]) {
                v += p.lb[i] * yl[i];
            }
        }
        (v, -hw)
    };

    let mut yu = DVector::zeros(m);
    let mut yl = DVector::zeros(m);
    let (mut pu, mut pl) = (yu.clone(), yl.clone());
    let mut t = 1.0f64;
    for it in 0..max_iter {
        let w = &p.g + p.a.transpose() * (&pu - &pl);
        let zz = -(&hinv * &w);
        let az = &p.a * &zz;
        let mut nu = pu.clone();
        let mut nl = pl.clone();
        for i in 0..m {
            // d/dy_u = A z - ub, d/dy_l = lb - A z.
            nu[i] = if finite(p.ub[i]) { (pu[i] + step * (az[i] - p.ub[i])).max(0.0) } else { 0.0 };
            nl[i] = if finite(p.lb[i]) { (pl[i] + step * (p.lb[i] - az[i])).max(0.0) } else { 0.0 };
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        pu = &nu + (&nu - &yu) * beta;
        pl = &nl + (&nl - &yl) * beta;
        yu = nu;
        yl = nl;
        t = t_next;
        if it % 500 == 499 {
            let (v, z) = value(&yu, &yl);
            if max_violation(p, &z) < 1e-10 && (p.objective(&z) - v).abs() < 1e-11 {
                break;
            }
            // Gradient restart keeps the momentum from oscillating.
            t = 1.0;
            pu = yu.clone();
            pl = yl.clone();
        }
    }
    value(&yu, &yl)
}
