//! Exact Gaussian process regression.
//!
//! The covariance is the sum of an isotropic squared-exponential term and an
//! ARD squared-exponential term:
//!
//! ```text
//! k(x, x') = s_iso² exp(-|x - x'|² / (2 l_iso²)) + s_ard² exp(-½ Σ_j (x_j - x'_j)² / l_j²)
//! ```
//!
//! with i.i.d. Gaussian observation noise `σ_n²`. The prior mean is zero.
//! Targets may optionally be standardized before fitting; predictions are then
//! mapped back to the original units.

use std::fmt::Write as _;

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, Par, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot floor below which a factorization is treated as singular.
const PIVOT_FLOOR: f64 = 1e-12;
/// Negative posterior variances down to this value are rounded up to zero.
const VARIANCE_FLOOR: f64 = -1e-10;
/// Jitter retries used by [`GpModel::fit_jittered`].
const JITTER_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub sigma_iso: f64,
    pub l_iso: f64,
    pub sigma_ard: f64,
    pub l_ard: Vec<f64>,
    pub sigma_n: f64,
}

impl KernelParams {
    pub fn dim(&self) -> usize {
        self.l_ard.len()
    }

    /// Number of hyperparameters in the log-space vector.
    pub fn n_hyper(d: usize) -> usize {
        d + 4
    }

    pub fn prior_variance(&self) -> f64 {
        self.sigma_iso * self.sigma_iso + self.sigma_ard * self.sigma_ard
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.l_ard.len() != d {
            return Err(Error::Input(format!(
                "kernel has {} ARD length scales, data has {d} inputs",
                self.l_ard.len()
            )));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let scales_ok = self.l_iso.is_finite()
            && self.l_iso > 0.0
            && self.l_ard.iter().all(|&l| l.is_finite() && l > 0.0);
        if !(ok(self.sigma_iso) && ok(self.sigma_ard) && ok(self.sigma_n) && scales_ok) {
            return Err(Error::Input(format!("invalid kernel parameters {self:?}")));
        }
        Ok(())
    }

    /// `[ln s_iso, ln l_iso, ln s_ard, ln l_1 .. ln l_d, ln σ_n]`
    pub fn to_log_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::n_hyper(self.dim()));
        v.push(self.sigma_iso.ln());
        v.push(self.l_iso.ln());
        v.push(self.sigma_ard.ln());
        v.extend(self.l_ard.iter().map(|l| l.ln()));
        v.push(self.sigma_n.ln());
        v
    }

    pub fn from_log_vec(theta: &[f64]) -> Self {
        let d = theta.len() - 4;
        KernelParams {
            sigma_iso: theta[0].exp(),
            l_iso: theta[1].exp(),
            sigma_ard: theta[2].exp(),
            l_ard: theta[3..3 + d].iter().map(|t| t.exp()).collect(),
            sigma_n: theta[3 + d].exp(),
        }
    }
}

fn factor(k: &DMatrix<f64>) -> Option<Llt<f64>> {
    let m = Mat::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)]);
    m.llt(Side::Lower).ok()
}

fn l_diagonal(c: &Llt<f64>) -> impl Iterator<Item = f64> + '_ {
    let l = c.L();
    (0..l.nrows()).map(move |i| l[(i, i)])
}

fn chol_solve(c: &Llt<f64>, b: &DVector<f64>) -> DVector<f64> {
    let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    let x = c.solve(&rhs);
    DVector::from_fn(b.len(), |i, _| x[(i, 0)])
}

fn lower_solve(c: &Llt<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(c.L(), rhs.as_mut(), Par::Seq);
    DVector::from_fn(b.len(), |i, _| rhs[(i, 0)])
}

/// The two kernel terms evaluated separately, plus their sum.
#[inline]
fn kernel_terms(params: &KernelParams, x: &[f64], x2: &[f64]) -> (f64, f64) {
    let mut sq = 0.0;
    let mut ard = 0.0;
    for ((a, b), l) in x.iter().zip(x2).zip(&params.l_ard) {
        let diff = a - b;
        sq += diff * diff;
        ard += diff * diff / (l * l);
    }
    let k_iso = params.sigma_iso.powi(2) * (-sq / (2.0 * params.l_iso * params.l_iso)).exp();
    let k_ard = params.sigma_ard.powi(2) * (-0.5 * ard).exp();
    (k_iso, k_ard)
}

pub fn kernel_eval(params: &KernelParams, x: &[f64], x2: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), x2.len());
    let (a, b) = kernel_terms(params, x, x2);
    a + b
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Cross-covariance matrix between the rows of `x` and the rows of `x2`.
pub fn gram(params: &KernelParams, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..x.nrows()).map(|i| row(x, i)).collect();
    let cols: Vec<Vec<f64>> = (0..x2.nrows()).map(|j| row(x2, j)).collect();
    DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| kernel_eval(params, &rows[i], &cols[j]))
}

/// Symmetric Gram matrix of `x` with itself, computed on one triangle.
fn gram_sym(params: &KernelParams, rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_eval(params, &rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n×d inputs.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let ds = Dataset { x, y };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_rows(rows: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Input("ragged input rows".into()));
        }
        let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Dataset::new(x, DVector::from_column_slice(y))
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() == 0 || self.x.ncols() == 0 {
            return Err(Error::Input("dataset needs at least one row and one column".into()));
        }
        if self.x.nrows() != self.y.len() {
            return Err(Error::Input(format!(
                "{} input rows but {} targets",
                self.x.nrows(),
                self.y.len()
            )));
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        row(&self.x, i)
    }
}

/// Affine map between original targets and the values the GP is fitted on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization {
        mean: 0.0,
        scale: 1.0,
    };

    /// Sample mean and standard deviation; a degenerate spread falls back to 1.
    pub fn from_targets(y: &DVector<f64>) -> Self {
        let n = y.len() as f64;
        let mean = y.sum() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var.sqrt() > 0.0 && var.is_finite() {
            var.sqrt()
        } else {
            1.0
        };
        Standardization { mean, scale }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    data: Dataset,
    params: KernelParams,
    standardization: Standardization,
    /// Targets after standardization.
    y_fit: DVector<f64>,
    chol: Llt<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    rows: Vec<Vec<f64>>,
}

impl GpModel {
    /// Fit on raw targets. Fails with [`Error::IllConditioned`] when `K_y` is
    /// not numerically positive definite.
    pub fn fit(data: Dataset, params: KernelParams) -> Result<Self> {
        Self::fit_inner(data, params, Standardization::IDENTITY, 0)
    }

    /// Fit on standardized targets, retrying with diagonal jitter on failure.
    pub fn fit_standardized(data: Dataset, params: KernelParams) -> Result<Self> {
        let st = Standardization::from_targets(&data.y);
        Self::fit_inner(data, params, st, JITTER_RETRIES)
    }

    /// Fit with a given standardization, retrying with jitter up to three times.
    pub fn fit_jittered(data: Dataset, params: KernelParams, st: Standardization) -> Result<Self> {
        Self::fit_inner(data, params, st, JITTER_RETRIES)
    }

    fn fit_inner(data: Dataset, params: KernelParams, st: Standardization, retries: u32) -> Result<Self> {
        data.validate()?;
        params.validate(data.d())?;
        if !(st.scale > 0.0) || !st.mean.is_finite() {
            return Err(Error::Input(format!("invalid standardization {st:?}")));
        }
        let rows: Vec<Vec<f64>> = (0..data.n()).map(|i| data.row(i)).collect();
        let mut k = gram_sym(&params, &rows);
        let noise = params.sigma_n * params.sigma_n;
        for i in 0..k.nrows() {
            k[(i, i)] += noise;
        }
        let mean_diag = k.diagonal().mean();
        let base_jitter = 1e-8 * mean_diag;

        let mut jitter = 0.0;
        let mut attempt = 0;
        let chol = loop {
            let mut ky = k.clone();
            if jitter > 0.0 {
                for i in 0..ky.nrows() {
                    ky[(i, i)] += jitter;
                }
            }
            let max_diag = ky.diagonal().max();
            if let Some(c) = factor(&ky) {
                let min_pivot = l_diagonal(&c).fold(f64::INFINITY, |m, v| m.min(v * v));
                if min_pivot > PIVOT_FLOOR * max_diag {
                    break c;
                }
            }
            if attempt >= retries {
                let suggested = if jitter > 0.0 { jitter * 10.0 } else { base_jitter };
                return Err(Error::IllConditioned { jitter: suggested });
            }
            attempt += 1;
            jitter = base_jitter * 10f64.powi(attempt as i32 - 1);
        };

        let y_fit = data.y.map(|v| (v - st.mean) / st.scale);
        let alpha = chol_solve(&chol, &y_fit);
        Ok(GpModel {
            data,
            params,
            standardization: st,
            y_fit,
            chol,
            alpha,
            jitter,
            rows,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Jitter added to the diagonal during fitting (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor of `K_y`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        let l = self.chol.L();
        DMatrix::from_fn(l.nrows(), l.ncols(), |i, j| l[(i, j)])
    }

    fn cross_cov(&self, x_star: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| kernel_eval(&self.params, x_star, r)),
        )
    }

    fn check_dim(&self, x_star: &[f64]) -> Result<()> {
        if x_star.len() != self.data.d() {
            return Err(Error::Input(format!(
                "query has {} inputs, model expects {}",
                x_star.len(),
                self.data.d()
            )));
        }
        Ok(())
    }

    /// Posterior of the latent function at `x_star`, in target units.
    pub fn predict(&self, x_star: &[f64]) -> Result<Prediction> {
        self.check_dim(x_star)?;
        let k_star = self.cross_cov(x_star);
        let mean = k_star.dot(&self.alpha);
        let v = lower_solve(&self.chol, &k_star);
        let mut var = kernel_eval(&self.params, x_star, x_star) - v.dot(&v);
        if var < 0.0 {
            if var < VARIANCE_FLOOR {
                return Err(Error::Numerical(format!("negative posterior variance {var:e}")));
            }
            var = 0.0;
        }
        let st = self.standardization;
        Ok(Prediction {
            mean: st.mean + st.scale * mean,
            variance: var * st.scale * st.scale,
        })
    }

    /// Log marginal likelihood of the fitted targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y_fit.len() as f64;
        let log_det_half: f64 = l_diagonal(&self.chol).map(f64::ln).sum();
        -0.5 * self.y_fit.dot(&self.alpha) - log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Gradient of the log marginal likelihood with respect to the log-space
    /// hyperparameters, ordered as [`KernelParams::to_log_vec`].
    pub fn lml_gradient(&self) -> Vec<f64> {
        let n = self.rows.len();
        let d = self.data.d();
        let p = &self.params;
        let k_inv = self.chol.inverse();
        let mut grad = vec![0.0; KernelParams::n_hyper(d)];
        let inv_l_iso2 = 1.0 / (p.l_iso * p.l_iso);
        let inv_l2: Vec<f64> = p.l_ard.iter().map(|l| 1.0 / (l * l)).collect();
        let mut diff2 = vec![0.0; d];

        // 0.5 * tr(W dK) with W = alpha alpha^T - K^-1, symmetric: sum the lower
        // triangle twice and the diagonal once.
        for i in 0..n {
            for j in 0..=i {
                let w = self.alpha[i] * self.alpha[j] - k_inv[(i, j)];
                let weight = if i == j { 0.5 * w } else { w };
                let (ri, rj) = (&self.rows[i], &self.rows[j]);
                let mut sq = 0.0;
                for t in 0..d {
                    let df = ri[t] - rj[t];
                    diff2[t] = df * df;
                    sq += diff2[t];
                }
                let (k_iso, k_ard) = kernel_terms(p, ri, rj);
                grad[0] += weight * 2.0 * k_iso;
                grad[1] += weight * k_iso * sq * inv_l_iso2;
                grad[2] += weight * 2.0 * k_ard;
                for t in 0..d {
                    grad[3 + t] += weight * k_ard * diff2[t] * inv_l2[t];
                }
                if i == j {
                    grad[3 + d] += weight * 2.0 * p.sigma_n * p.sigma_n;
                }
            }
        }
        grad
    }

    /// Gradient of the posterior mean with respect to the query point.
    pub fn mean_jacobian(&self, x_star: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x_star)?;
        let d = x_star.len();
        let p = &self.params;
        let inv_l_iso2 = 1.0 / (p.l_iso * p.l_iso);
        let mut grad = vec![0.0; d];
        for (r, a) in self.rows.iter().zip(self.alpha.iter()) {
            let (k_iso, k_ard) = kernel_terms(p, x_star, r);
            for j in 0..d {
                let diff = x_star[j] - r[j];
                let l2 = p.l_ard[j] * p.l_ard[j];
                grad[j] -= a * (k_iso * diff * inv_l_iso2 + k_ard * diff / l2);
            }
        }
        let scale = self.standardization.scale;
        Ok(grad.into_iter().map(|g| g * scale).collect())
    }

    /// Serialize to the flat text model format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let st = self.standardization;
        let join = |v: &mut dyn Iterator<Item = f64>| v.map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        writeln!(s, "gpmpc-gp 1").unwrap();
        writeln!(s, "n {}", self.data.n()).unwrap();
        writeln!(s, "d {}", self.data.d()).unwrap();
        writeln!(s, "y_mean {:?}", st.mean).unwrap();
        writeln!(s, "y_scale {:?}", st.scale).unwrap();
        writeln!(s, "jitter {:?}", self.jitter).unwrap();
        writeln!(s, "sigma_iso {:?}", p.sigma_iso).unwrap();
        writeln!(s, "l_iso {:?}", p.l_iso).unwrap();
        writeln!(s, "sigma_ard {:?}", p.sigma_ard).unwrap();
        writeln!(s, "l_ard {}", join(&mut p.l_ard.iter().copied())).unwrap();
        writeln!(s, "sigma_n {:?}", p.sigma_n).unwrap();
        writeln!(s, "X").unwrap();
        for r in &self.rows {
            writeln!(s, "{}", join(&mut r.iter().copied())).unwrap();
        }
        writeln!(s, "y").unwrap();
        for v in self.data.y.iter() {
            writeln!(s, "{v:?}").unwrap();
        }
        writeln!(s, "end").unwrap();
        s
    }

    /// Parse the text model format and refit the cached factorization.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let bad = |m: String| Error::Parse(format!("model file: {m}"));
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("missing {what}")));

        let header = next("header")?;
        if header != "gpmpc-gp 1" {
            return Err(bad(format!("unknown header '{header}'")));
        }
        fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| Error::Parse(format!("model file: expected key '{key}', got '{line}'")))
        }
        fn num(s: &str) -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("model file: bad number '{s}': {e}")))
        }
        fn nums(s: &str) -> Result<Vec<f64>> {
            s.split_whitespace().map(num).collect()
        }
        let count = |s: &str| -> Result<usize> {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("model file: bad count '{s}': {e}")))
        };

        let n = count(field(next("n")?, "n")?)?;
        let d = count(field(next("d")?, "d")?)?;
        let mean = num(field(next("y_mean")?, "y_mean")?)?;
        let scale = num(field(next("y_scale")?, "y_scale")?)?;
        let jitter = num(field(next("jitter")?, "jitter")?)?;
        let sigma_iso = num(field(next("sigma_iso")?, "sigma_iso")?)?;
        let l_iso = num(field(next("l_iso")?, "l_iso")?)?;
        let sigma_ard = num(field(next("sigma_ard")?, "sigma_ard")?)?;
        let l_ard = nums(field(next("l_ard")?, "l_ard")?)?;
        let sigma_n = num(field(next("sigma_n")?, "sigma_n")?)?;
        if next("X")? != "X" {
            return Err(bad("expected 'X' block".into()));
        }
        let mut x = Vec::with_capacity(n);
        for _ in 0..n {
            let r = nums(next("X row")?)?;
            if r.len() != d {
                return Err(bad(format!("X row has {} values, expected {d}", r.len())));
            }
            x.push(r);
        }
        if next("y")? != "y" {
            return Err(bad("expected 'y' block".into()));
        }
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            y.push(num(next("y value")?)?);
        }
        if next("end")? != "end" {
            return Err(bad("expected 'end'".into()));
        }

        let params = KernelParams {
            sigma_iso,
            l_iso,
            sigma_ard,
            l_ard,
            sigma_n,
        };
        let data = Dataset::from_rows(&x, &y)?;
        let st = Standardization { mean, scale };
        Self::fit_with_fixed_jitter(data, params, st, jitter)
    }

    /// Refit reproducing a previously recorded jitter exactly.
    fn fit_with_fixed_jitter(data: Dataset, params: KernelParams, st: Standardization, jitter: f64) -> Result<Self> {
        if jitter == 0.0 {
            return Self::fit_inner(data, params, st, 0);
        }
        data.validate()?;
        params.validate(data.d())?;
        let rows: Vec<Vec<f64>> = (0..data.n()).map(|i| data.row(i)).collect();
        let mut k = gram_sym(&params, &rows);
        let noise = params.sigma_n * params.sigma_n;
        for i in 0..k.nrows() {
            k[(i, i)] += noise;
        }
        for i in 0..k.nrows() {
            k[(i, i)] += jitter;
        }
        let chol = factor(&k).ok_or(Error::IllConditioned { jitter: jitter * 10.0 })?;
        let y_fit = data.y.map(|v| (v - st.mean) / st.scale);
        let alpha = chol_solve(&chol, &y_fit);
        Ok(GpModel {
            data,
            params,
            standardization: st,
            y_fit,
            chol,
            alpha,
            jitter,
            rows,
        })
    }
}
