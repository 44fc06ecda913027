//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    ½ zᵀ H z + gᵀ z
//! subject to  lb ≤ A z ≤ ub
//! ```
//!
//! with an operator-splitting (ADMM) iteration on a Ruiz-equilibrated copy of
//! the problem, followed by a polish step that solves the KKT system on the
//! detected active set. Infinite bounds are written as `±INF`.
//!
//! Dual convention: `H z + g + Aᵀ y = 0`, `y_i ≥ 0` at an active upper bound,
//! `y_i ≤ 0` at an active lower bound, `y_i = 0` otherwise.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Sentinel magnitude for an absent bound.
pub const INF: f64 = 1e20;
/// Most negative eigenvalue of `H` that is clipped rather than rejected.
pub const PSD_FLOOR: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIter => "max_iter",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub duals: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub relaxation: f64,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tol: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            relaxation: 1.6,
            polish: true,
        }
    }
}

impl QpProblem {
    pub fn n_vars(&self) -> usize {
        self.g.len()
    }

    pub fn n_cons(&self) -> usize {
        self.lb.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    fn check_shapes(&self) -> Result<()> {
        let m = self.n_vars();
        let c = self.n_cons();
        if self.h.shape() != (m, m) {
            return Err(Error::Input(format!("H is {:?}, expected {m}x{m}", self.h.shape())));
        }
        if self.a.shape() != (c, m) || self.ub.len() != c {
            return Err(Error::Input(format!(
                "constraint shapes A {:?}, lb {}, ub {} do not match {m} variables",
                self.a.shape(),
                c,
                self.ub.len()
            )));
        }
        let finite = self.h.iter().chain(self.g.iter()).chain(self.a.iter()).all(|v| v.is_finite());
        if !finite || self.lb.iter().chain(self.ub.iter()).any(|v| v.is_nan()) {
            return Err(Error::Input("QP data contains non-finite values".into()));
        }
        Ok(())
    }

    /// Write `H`, `g`, `A`, `lb`, `ub` as CSV matrices into `dir`.
    pub fn dump_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let write = |name: &str, m: &DMatrix<f64>| -> Result<()> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            for i in 0..m.nrows() {
                w.write_record(m.row(i).iter().map(|v| format!("{v:?}")))?;
            }
            w.flush()?;
            Ok(())
        };
        write("H.csv", &self.h)?;
        write("g.csv", &DMatrix::from_column_slice(self.g.len(), 1, self.g.as_slice()))?;
        write("A.csv", &self.a)?;
        write("lb.csv", &DMatrix::from_column_slice(self.lb.len(), 1, self.lb.as_slice()))?;
        write("ub.csv", &DMatrix::from_column_slice(self.ub.len(), 1, self.ub.as_slice()))?;
        Ok(())
    }
}

#[inline]
fn is_inf(v: f64) -> bool {
    v.abs() >= INF
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest of the stationarity, primal feasibility and complementarity residuals.
pub fn kkt_check(p: &QpProblem, z: &DVector<f64>, duals: &DVector<f64>) -> f64 {
    let az = &p.a * z;
    let stat = inf_norm(&(&p.h * z + &p.g + p.a.transpose() * duals));
    let mut prim: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..p.n_cons() {
        let (lo, hi, v, y) = (p.lb[i], p.ub[i], az[i], duals[i]);
        if !is_inf(lo) {
            prim = prim.max(lo - v);
        }
        if !is_inf(hi) {
            prim = prim.max(v - hi);
        }
        if y > 0.0 {
            comp = comp.max(if is_inf(hi) { y } else { y * (hi - v).abs() });
        } else if y < 0.0 {
            comp = comp.max(if is_inf(lo) { -y } else { -y * (v - lo).abs() });
        }
    }
    stat.max(prim).max(comp)
}

/// Symmetrize `H` and clip eigenvalues in `[PSD_FLOOR, 0)`.
fn prepare_hessian(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let hs = (h + h.transpose()) * 0.5;
    let scale = hs.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let eig = hs.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(hs);
    }
    if min < PSD_FLOOR * scale {
        return Err(Error::Input(format!("Hessian is not positive semidefinite (eigenvalue {min:e})")));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}

/// Diagonal equilibration: `P̄ = c D H D`, `Ā = E A D`.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn ruiz(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>) -> Scaling {
    let m = h.nrows();
    let nc = a.nrows();
    let mut d = DVector::from_element(m, 1.0);
    let mut e = DVector::from_element(nc, 1.0);
    let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..15 {
        let mut dd = DVector::zeros(m);
        let mut ee = DVector::zeros(nc);
        for j in 0..m {
            let mut n: f64 = 0.0;
            for i in 0..m {
                n = n.max((d[i] * h[(i, j)] * d[j]).abs());
            }
            for i in 0..nc {
                n = n.max((e[i] * a[(i, j)] * d[j]).abs());
            }
            dd[j] = 1.0 / clamp(n).sqrt();
        }
        for i in 0..nc {
            let mut n: f64 = 0.0;
            for j in 0..m {
                n = n.max((e[i] * a[(i, j)] * d[j]).abs());
            }
            ee[i] = 1.0 / clamp(n).sqrt();
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&ee);
    }
    let mut col_mean = 0.0;
    for j in 0..m {
        let mut n: f64 = 0.0;
        for i in 0..m {
            n = n.max((d[i] * h[(i, j)] * d[j]).abs());
        }
        col_mean += n;
    }
    col_mean /= m.max(1) as f64;
    let q_norm = g.iter().zip(d.iter()).fold(0.0_f64, |acc, (gi, di)| acc.max((gi * di).abs()));
    let c = 1.0 / clamp(col_mean.max(q_norm));
    Scaling { d, e, c }
}

pub fn solve(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    solve_warm(p, settings, None)
}

/// Solve, optionally warm-starting from a previous primal/dual pair.
pub fn solve_warm(
    p: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<QpSolution> {
    p.check_shapes()?;
    let h = prepare_hessian(&p.h)?;
    let m = p.n_vars();
    let nc = p.n_cons();

    let infeasible = |iterations| {
        let z = DVector::zeros(m);
        QpSolution {
            objective: 0.0,
            kkt_residual: f64::INFINITY,
            duals: DVector::zeros(nc),
            z,
            status: QpStatus::Infeasible,
            iterations,
        }
    };
    if (0..nc).any(|i| p.lb[i] > p.ub[i]) {
        return Ok(infeasible(0));
    }
    let prob = QpProblem {
        h,
        g: p.g.clone(),
        a: p.a.clone(),
        lb: p.lb.clone(),
        ub: p.ub.clone(),
    };

    let sc = ruiz(&prob.h, &prob.g, &prob.a);
    let dmat = DMatrix::from_diagonal(&sc.d);
    let hs = (&dmat * &prob.h * &dmat) * sc.c;
    let gs = prob.g.component_mul(&sc.d) * sc.c;
    let as_ = DMatrix::from_diagonal(&sc.e) * &prob.a * &dmat;
    let scale_bound = |v: f64, e: f64| if is_inf(v) { v.signum() * INF } else { v * e };
    let lbs = DVector::from_fn(nc, |i, _| scale_bound(prob.lb[i], sc.e[i]));
    let ubs = DVector::from_fn(nc, |i, _| scale_bound(prob.ub[i], sc.e[i]));

    // Equality rows get a stiffer penalty.
    let rho_vec = DVector::from_fn(nc, |i, _| {
        if prob.lb[i] == prob.ub[i] {
            settings.rho * 1e3
        } else {
            settings.rho
        }
    });
    let mut kkt = &hs + DMatrix::identity(m, m) * settings.sigma;
    kkt += as_.transpose() * DMatrix::from_diagonal(&rho_vec) * &as_;
    let chol = Cholesky::new(kkt).ok_or_else(|| Error::Numerical("ADMM system not positive definite".into()))?;

    let mut x = DVector::zeros(m);
    let mut y = DVector::zeros(nc);
    if let Some((zw, yw)) = warm {
        if zw.len() == m && yw.len() == nc {
            x = zw.component_div(&sc.d);
            y = yw.component_div(&sc.e) * sc.c;
        }
    }
    let project = |v: &DVector<f64>| DVector::from_fn(nc, |i, _| v[i].clamp(lbs[i], ubs[i]));
    let mut z = project(&(&as_ * &x));

    let a_rel = settings.relaxation;
    let mut iterations = 0;
    let mut converged = false;
    let eps = settings.tol * 0.1;
    while iterations < settings.max_iter {
        iterations += 1;
        let rhs = &x * settings.sigma - &gs + as_.transpose() * (rho_vec.component_mul(&z) - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &as_ * &x_tilde;
        let x_next = &x_tilde * a_rel + &x * (1.0 - a_rel);
        let z_relaxed = &z_tilde * a_rel + &z * (1.0 - a_rel);
        let z_next = project(&(&z_relaxed + y.component_div(&rho_vec)));
        let y_next = &y + rho_vec.component_mul(&(&z_relaxed - &z_next));
        let dy = &y_next - &y;
        x = x_next;
        z = z_next;
        y = y_next;

        if iterations % 10 == 0 || iterations == settings.max_iter {
            // Residuals on the unscaled problem.
            let xu = x.component_mul(&sc.d);
            let yu = y.component_mul(&sc.e) / sc.c;
            let axu = &prob.a * &xu;
            let zu = z.component_div(&sc.e);
            let prim = inf_norm(&(&axu - &zu));
            let dual = inf_norm(&(&prob.h * &xu + &prob.g + prob.a.transpose() * &yu));
            let prim_tol = eps + eps * inf_norm(&axu).max(inf_norm(&zu));
            let dual_tol = eps + eps * inf_norm(&(&prob.h * &xu)).max(inf_norm(&prob.g));
            if prim <= prim_tol && dual <= dual_tol {
                converged = true;
                break;
            }
            if primal_infeasible(&prob, &dy.component_mul(&sc.e), 1e-7) {
                return Ok(infeasible(iterations));
            }
        }
    }

    let mut zu = x.component_mul(&sc.d);
    let mut yu = y.component_mul(&sc.e) / sc.c;
    if settings.polish {
        if let Some((zp, yp)) = polish(&prob, &yu) {
            let r_old = kkt_check(&prob, &zu, &yu);
            let r_new = kkt_check(&prob, &zp, &yp);
            if r_new <= r_old || r_new <= settings.tol {
                zu = zp;
                yu = yp;
            }
        }
    }
    let kkt_residual = kkt_check(&prob, &zu, &yu);
    let status = if kkt_residual <= settings.tol {
        QpStatus::Optimal
    } else if !converged && primal_infeasible_strict(&prob) {
        QpStatus::Infeasible
    } else {
        QpStatus::MaxIter
    };
    Ok(QpSolution {
        objective: prob.objective(&zu),
        z: zu,
        duals: yu,
        status,
        kkt_residual,
        iterations,
    })
}

/// Farkas-type certificate on a dual increment.
fn primal_infeasible(p: &QpProblem, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = inf_norm(dy);
    if norm < 1e-12 {
        return false;
    }
    if inf_norm(&(p.a.transpose() * dy)) > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..p.n_cons() {
        let v = dy[i];
        if v > 0.0 {
            if is_inf(p.ub[i]) {
                if v > eps * norm {
                    return false;
                }
                continue;
            }
            support += p.ub[i] * v;
        } else if v < 0.0 {
            if is_inf(p.lb[i]) {
                if -v > eps * norm {
                    return false;
                }
                continue;
            }
            support += p.lb[i] * v;
        }
    }
    support < -eps * norm
}

/// Phase-one check used when ADMM stalls: minimize total bound violation.
fn primal_infeasible_strict(p: &QpProblem) -> bool {
    let m = p.n_vars();
    let nc = p.n_cons();
    // Feasibility QP: min ½|z|²·1e-8 s.t. the same rows; run a plain ADMM with
    // zero cost so any certificate shows up quickly.
    let zero = QpProblem {
        h: DMatrix::identity(m, m) * 1e-8,
        g: DVector::zeros(m),
        a: p.a.clone(),
        lb: p.lb.clone(),
        ub: p.ub.clone(),
    };
    let settings = QpSettings {
        max_iter: 2000,
        polish: false,
        ..QpSettings::default()
    };
    let _ = nc;
    solve_feasibility(&zero, &settings).unwrap_or_default()
}

fn solve_feasibility(p: &QpProblem, settings: &QpSettings) -> Option<bool> {
    let m = p.n_vars();
    let nc = p.n_cons();
    let rho = settings.rho;
    let kkt = &p.h + DMatrix::identity(m, m) * settings.sigma + p.a.transpose() * &p.a * rho;
    let chol = Cholesky::new(kkt)?;
    let mut x = DVector::zeros(m);
    let mut z = DVector::zeros(nc);
    let mut y = DVector::zeros(nc);
    for k in 0..settings.max_iter {
        let rhs = &x * settings.sigma - &p.g + p.a.transpose() * (&z * rho - &y);
        let xt = chol.solve(&rhs);
        let zt = &p.a * &xt;
        let zr = &zt * 1.6 + &z * (1.0 - 1.6);
        x = &xt * 1.6 + &x * (1.0 - 1.6);
        let zn = DVector::from_fn(nc, |i, _| (zr[i] + y[i] / rho).clamp(p.lb[i], p.ub[i]));
        let yn = &y + (&zr - &zn) * rho;
        let dy = &yn - &y;
        z = zn;
        y = yn;
        if k % 10 == 9 {
            if primal_infeasible(p, &dy, 1e-6) {
                return Some(true);
            }
            if inf_norm(&(&p.a * &x - &z)) < 1e-9 {
                return Some(false);
            }
        }
    }
    Some(false)
}

/// Solve the equality-constrained QP on an active set guess, then repair the
/// guess by adding violated rows and dropping wrong-signed multipliers.
fn polish(p: &QpProblem, y0: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let nc = p.n_cons();
    let y_tol = 1e-9 * (1.0 + inf_norm(y0));
    // 0 = inactive, -1 = at lower, +1 = at upper.
    let mut side: Vec<i8> = (0..nc)
        .map(|i| {
            let fixed = !is_inf(p.lb[i]) && p.lb[i] == p.ub[i];
            if fixed || (!is_inf(p.ub[i]) && y0[i] > y_tol) {
                1
            } else if !is_inf(p.lb[i]) && y0[i] < -y_tol {
                -1
            } else {
                0
            }
        })
        .collect();

    let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;
    for _ in 0..(3 * nc + 10) {
        let (z, y) = solve_active(p, &side)?;
        let r = kkt_check(p, &z, &y);
        if best.as_ref().is_none_or(|b| r < b.2) {
            best = Some((z.clone(), y.clone(), r));
        }
        let az = &p.a * &z;
        let mut worst_primal = (0usize, 0.0f64, 0i8);
        for i in 0..nc {
            if side[i] != 0 {
                continue;
            }
            let scale = 1e-12 * (1.0 + az[i].abs());
            if !is_inf(p.ub[i]) && az[i] - p.ub[i] > worst_primal.1.max(scale) {
                worst_primal = (i, az[i] - p.ub[i], 1);
            }
            if !is_inf(p.lb[i]) && p.lb[i] - az[i] > worst_primal.1.max(scale) {
                worst_primal = (i, p.lb[i] - az[i], -1);
            }
        }
        let mut worst_dual = (0usize, 0.0f64);
        for i in 0..nc {
            let eq = p.lb[i] == p.ub[i];
            if eq {
                continue;
            }
            let wrong = match side[i] {
                1 => -y[i],
                -1 => y[i],
                _ => 0.0,
            };
            if wrong > worst_dual.1.max(1e-12) {
                worst_dual = (i, wrong);
            }
        }
        if worst_primal.1 <= 0.0 && worst_dual.1 <= 0.0 {
            return Some((z, y));
        }
        if worst_primal.1 > 0.0 {
            side[worst_primal.0] = worst_primal.2;
        }
        if worst_dual.1 > 0.0 {
            side[worst_dual.0] = 0;
        }
    }
    best.map(|(z, y, _)| (z, y))
}

/// Regularized KKT solve with iterative refinement.
fn solve_active(p: &QpProblem, side: &[i8]) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = p.n_vars();
    let act: Vec<usize> = (0..side.len()).filter(|&i| side[i] != 0).collect();
    let k = act.len();
    let n = m + k;
    let mut kkt = DMatrix::zeros(n, n);
    kkt.view_mut((0, 0), (m, m)).copy_from(&p.h);
    for (r, &i) in act.iter().enumerate() {
        for j in 0..m {
            kkt[(m + r, j)] = p.a[(i, j)];
            kkt[(j, m + r)] = p.a[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(n);
    for j in 0..m {
        rhs[j] = -p.g[j];
    }
    for (r, &i) in act.iter().enumerate() {
        rhs[m + r] = if side[i] > 0 { p.ub[i] } else { p.lb[i] };
    }
    let delta = 1e-10 * (1.0 + p.h.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
    let mut reg = kkt.clone();
    for j in 0..m {
        reg[(j, j)] += delta;
    }
    for r in 0..k {
        reg[(m + r, m + r)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..25 {
        let res = &rhs - &kkt * &sol;
        if inf_norm(&res) < 1e-14 * (1.0 + inf_norm(&rhs)) {
            break;
        }
        sol += lu.solve(&res)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let z = sol.rows(0, m).into_owned();
    let mut y = DVector::zeros(side.len());
    for (r, &i) in act.iter().enumerate() {
        y[i] = sol[m + r];
    }
    Some((z, y))
}
