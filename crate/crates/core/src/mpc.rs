//! Receding-horizon voltage controller.
//!
//! The prediction model is the incremental state-space form
//!
//! ```text
//! x = [V_FC, P_H2, dI, Q_H2, Q_air]
//! x⁺ = A x + B du,   y = C x
//! ```
//!
//! where the sensitivities of the one-step maps for voltage and pressure fill
//! the first two rows. Increments over the control horizon and one slack per
//! prediction step form the QP decision vector.

use nalgebra::{DMatrix, DVector, RowSVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::plant::{Measurement, PlantInput, PlantParams, PlantState};
use crate::qp::{self, QpProblem, QpSettings, QpSolution, QpStatus, INF};

pub type Mat5 = SMatrix<f64, 5, 5>;
pub type Mat52 = SMatrix<f64, 5, 2>;

/// Controller state in the order [V_FC, P_H2, dI, Q_H2, Q_air].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtrlState {
    pub v_fc: f64,
    pub p_h2: f64,
    pub d_i: f64,
    pub q_h2: f64,
    pub q_air: f64,
}

impl CtrlState {
    pub fn to_vector(&self) -> SVector<f64, 5> {
        SVector::from([self.v_fc, self.p_h2, self.d_i, self.q_h2, self.q_air])
    }
}

/// Sensitivities of the one-step voltage and pressure maps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Partials {
    pub dv_dq_h2: f64,
    pub dv_dq_air: f64,
    pub dv_di: f64,
    pub dp_dq_h2: f64,
    pub dp_dq_air: f64,
    pub dp_di: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinModel {
    pub a: Mat5,
    pub b: Mat52,
    pub c: RowSVector<f64, 5>,
    /// Std of the pressure prediction at the linearization point.
    pub sigma_p: f64,
    pub partials: Partials,
}

impl LinModel {
    pub fn from_partials(partials: Partials, sigma_p: f64) -> Self {
        let mut a = Mat5::zeros();
        for i in [0, 1, 3, 4] {
            a[(i, i)] = 1.0;
        }
        a[(0, 2)] = partials.dv_di;
        a[(1, 2)] = partials.dp_di;
        let mut b = Mat52::zeros();
        b[(0, 0)] = partials.dv_dq_h2;
        b[(0, 1)] = partials.dv_dq_air;
        b[(1, 0)] = partials.dp_dq_h2;
        b[(1, 1)] = partials.dp_dq_air;
        b[(3, 0)] = 1.0;
        b[(4, 1)] = 1.0;
        let mut c = RowSVector::<f64, 5>::zeros();
        c[0] = 1.0;
        LinModel {
            a,
            b,
            c,
            sigma_p,
            partials,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub hp: usize,
    pub hu: usize,
    pub qw: f64,
    pub rw: [f64; 2],
    pub rho: f64,
    pub alpha: f64,
    /// Voltage reference, V.
    pub r: f64,
    pub u_lb: [f64; 2],
    pub u_ub: [f64; 2],
    pub du_lb: [f64; 2],
    pub du_ub: [f64; 2],
    pub p_limit: f64,
    pub dt: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            hp: 10,
            hu: 4,
            qw: 10.0,
            rw: [0.01, 0.01],
            rho: 1e4,
            alpha: 1.0,
            r: 48.0,
            u_lb: [100.0, 300.0],
            u_ub: [400.0, 700.0],
            du_lb: [-40.0, -40.0],
            du_ub: [20.0, 20.0],
            p_limit: 2.5,
            dt: 0.5,
            qp_tol: 1e-6,
            qp_max_iter: 4000,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hp == 0 || self.hu == 0 || self.hu > self.hp {
            return bad("horizons must satisfy 1 <= hu <= hp");
        }
        if !(self.qw >= 0.0 && self.rw.iter().all(|w| *w >= 0.0) && self.rho >= 0.0 && self.alpha >= 0.0) {
            return bad("weights, rho and alpha must be >= 0");
        }
        for f in 0..2 {
            if !(self.u_lb[f] < self.u_ub[f]) || !(self.du_lb[f] <= 0.0 && 0.0 <= self.du_ub[f]) {
                return bad("flow bounds must be ordered and rate bounds must bracket 0");
            }
        }
        if !(self.dt > 0.0 && self.p_limit > 0.0 && self.r.is_finite()) {
            return bad("dt and p_limit must be > 0");
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            return bad("qp_tol must be > 0 and qp_max_iter >= 1");
        }
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        2 * self.hu + self.hp
    }

    fn qp_settings(&self) -> QpSettings {
        QpSettings {
            tol: self.qp_tol,
            max_iter: self.qp_max_iter,
            ..QpSettings::default()
        }
    }
}

/// Query point for the one-step models: (Q_H2, Q_air, I, prior state).
fn gp_point(input: &PlantInput, state: f64) -> [f64; 4] {
    [input.q_h2, input.q_air, input.current, state]
}

/// Linearize the two GP models at the latest measurement.
pub fn linearize_gp(fv: &GpModel, fp: &GpModel, meas: &Measurement, input_now: &PlantInput) -> Result<LinModel> {
    let jv = fv.mean_jacobian(&gp_point(input_now, meas.v_fc))?;
    let pp = gp_point(input_now, meas.p_h2);
    let jp = fp.mean_jacobian(&pp)?;
    let sigma_p = fp.predict(&pp)?.std();
    let partials = Partials {
        dv_dq_h2: jv[0],
        dv_dq_air: jv[1],
        dv_di: jv[2],
        dp_dq_h2: jp[0],
        dp_dq_air: jp[1],
        dp_di: jp[2],
    };
    Ok(LinModel::from_partials(partials, sigma_p))
}

/// Probe sizes for the plant finite differences: flows (lpm) and current (A).
pub const PLANT_PROBE: (f64, f64) = (0.5, 0.05);

/// Central differences of the plant's one-step map at `state`.
pub fn linearize_plant(
    params: &PlantParams,
    state: &PlantState,
    input_now: &PlantInput,
    dt: f64,
    probe: (f64, f64),
) -> Result<LinModel> {
    let one_step = |u: PlantInput| -> Result<(f64, f64)> {
        let s = params.step(state, &u, dt)?;
        Ok((params.output_voltage(&s, &u)?, s.p_h2))
    };
    let diff = |k: usize, h: f64| -> Result<(f64, f64)> {
        let shift = |sign: f64| {
            let mut u = *input_now;
            match k {
                0 => u.q_h2 += sign * h,
                1 => u.q_air += sign * h,
                _ => u.current += sign * h,
            }
            u
        };
        let (vp, pp) = one_step(shift(1.0))?;
        let (vm, pm) = one_step(shift(-1.0))?;
        Ok(((vp - vm) / (2.0 * h), (pp - pm) / (2.0 * h)))
    };
    let (dv_dq_h2, dp_dq_h2) = diff(0, probe.0)?;
    let (dv_dq_air, dp_dq_air) = diff(1, probe.0)?;
    let (dv_di, dp_di) = diff(2, probe.1)?;
    let partials = Partials {
        dv_dq_h2,
        dv_dq_air,
        dv_di,
        dp_dq_h2,
        dp_dq_air,
        dp_di,
    };
    Ok(LinModel::from_partials(partials, 0.0))
}

/// Affine prediction of one output over the horizon: `y_j = c_j + G_j z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub offset: DVector<f64>,
    pub gain: DMatrix<f64>,
}

impl Prediction {
    pub fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.gain * z
    }
}

/// Condensed predictions of V_FC and P_H2 for steps 1..=Hp. The current
/// increment dI acts through the first transition only.
pub fn condense(lin: &LinModel, x0: &CtrlState, cfg: &MpcConfig) -> (Prediction, Prediction) {
    let m = cfg.n_vars();
    let mut v = Prediction {
        offset: DVector::zeros(cfg.hp),
        gain: DMatrix::zeros(cfg.hp, m),
    };
    let mut p = v.clone();
    // Free response and per-increment responses, propagated step by step.
    let mut free = x0.to_vector();
    let mut forced: Vec<SVector<f64, 5>> = vec![SVector::zeros(); 2 * cfg.hu];
    for j in 0..cfg.hp {
        free = lin.a * free;
        for col in forced.iter_mut() {
            *col = lin.a * *col;
        }
        if j < cfg.hu {
            forced[2 * j] += lin.b.column(0);
            forced[2 * j + 1] += lin.b.column(1);
        }
        v.offset[j] = (lin.c * free)[0];
        p.offset[j] = free[1];
        for (k, col) in forced.iter().enumerate() {
            v.gain[(j, k)] = (lin.c * col)[0];
            p.gain[(j, k)] = col[1];
        }
    }
    (v, p)
}

/// Assemble the MPC QP over `z = [du⁰ .. du^{Hu-1}, ε¹ .. ε^{Hp}]`.
pub fn build_qp(lin: &LinModel, x0: &CtrlState, u_prev: [f64; 2], cfg: &MpcConfig) -> Result<QpProblem> {
    cfg.validate().map_err(|e| Error::Input(e.to_string()))?;
    let (hp, hu) = (cfg.hp, cfg.hu);
    let m = cfg.n_vars();
    let eps = |j: usize| 2 * hu + j;
    let (v, p) = condense(lin, x0, cfg);

    let mut h = DMatrix::zeros(m, m);
    let mut g = DVector::zeros(m);
    for j in 0..hp {
        let gj = v.gain.row(j);
        h += gj.transpose() * gj * (2.0 * cfg.qw);
        g += gj.transpose() * (2.0 * cfg.qw * (v.offset[j] - cfg.r));
    }
    for i in 0..hu {
        h[(2 * i, 2 * i)] += 2.0 * cfg.rw[0];
        h[(2 * i + 1, 2 * i + 1)] += 2.0 * cfg.rw[1];
    }
    for j in 0..hp {
        h[(eps(j), eps(j))] += 2.0 * cfg.rho;
    }

    // Planned pressure move from flow increments alone.
    let mut dp_move = DMatrix::zeros(hp, m);
    for j in 0..hp {
        for i in 0..hu.min(j + 1) {
            dp_move[(j, 2 * i)] = lin.partials.dp_dq_h2;
            dp_move[(j, 2 * i + 1)] = lin.partials.dp_dq_air;
        }
    }

    let n_rows = 4 * hu + 3 * hp;
    let mut a = DMatrix::zeros(n_rows, m);
    let mut lb = DVector::from_element(n_rows, -INF);
    let mut ub = DVector::from_element(n_rows, INF);
    let mut row = 0;
    for i in 0..hu {
        for f in 0..2 {
            a[(row, 2 * i + f)] = 1.0;
            lb[row] = cfg.du_lb[f];
            ub[row] = cfg.du_ub[f];
            row += 1;
        }
    }
    for i in 0..hu {
        for f in 0..2 {
            for k in 0..=i {
                a[(row, 2 * k + f)] = 1.0;
            }
            lb[row] = cfg.u_lb[f] - u_prev[f];
            ub[row] = cfg.u_ub[f] - u_prev[f];
            row += 1;
        }
    }
    for j in 0..hp {
        a.row_mut(row).copy_from(&p.gain.row(j));
        a[(row, eps(j))] -= 1.0;
        ub[row] = cfg.p_limit - p.offset[j];
        row += 1;
    }
    let tighten = cfg.alpha * lin.sigma_p;
    for j in 0..hp {
        let r = p.gain.row(j) + dp_move.row(j) * tighten;
        a.row_mut(row).copy_from(&r);
        a[(row, eps(j))] -= 1.0;
        ub[row] = cfg.p_limit - p.offset[j];
        row += 1;
    }
    for j in 0..hp {
        a[(row, eps(j))] = 1.0;
        lb[row] = 0.0;
        row += 1;
    }
    debug_assert_eq!(row, n_rows);
    Ok(QpProblem { h, g, a, lb, ub })
}

#[derive(Debug, Clone)]
pub struct CtrlOutput {
    pub q_h2_cmd: f64,
    pub q_air_cmd: f64,
    /// Applied first-step increments.
    pub du: [f64; 2],
    pub slack_used: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    /// Previous flows were held because the QP had no usable solution.
    pub fallback: bool,
    pub predicted_v: Vec<f64>,
    pub predicted_p: Vec<f64>,
    pub solution: QpSolution,
}

impl CtrlOutput {
    pub fn predicted_p_peak(&self) -> f64 {
        self.predicted_p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Largest command within `[lo, hi]` such that `cmd - prev` also lies in
/// `[dlo, dhi]` when evaluated in floating point.
fn exact_command(prev: f64, du: f64, lo: f64, hi: f64, dlo: f64, dhi: f64) -> f64 {
    let mut cmd = (prev + du.clamp(dlo, dhi)).clamp(lo, hi);
    while cmd - prev > dhi && cmd > lo {
        cmd = cmd.next_down();
    }
    while cmd - prev < dlo && cmd < hi {
        cmd = cmd.next_up();
    }
    cmd
}

/// One controller move from a linear model.
pub fn control_from_model(
    lin: &LinModel,
    x0: &CtrlState,
    u_prev: [f64; 2],
    cfg: &MpcConfig,
    warm: Option<&QpSolution>,
) -> Result<CtrlOutput> {
    let prob = build_qp(lin, x0, u_prev, cfg)?;
    let warm = warm
        .filter(|s| s.z.len() == prob.n_vars() && s.duals.len() == prob.n_cons())
        .map(|s| (&s.z, &s.duals));
    let sol = qp::solve_warm(&prob, &cfg.qp_settings(), warm)?;
    let (v, p) = condense(lin, x0, cfg);

    let usable = sol.status != QpStatus::Infeasible && sol.z.iter().all(|v| v.is_finite());
    let (du_raw, z) = if usable {
        ([sol.z[0], sol.z[1]], sol.z.clone())
    } else {
        ([0.0, 0.0], DVector::zeros(prob.n_vars()))
    };
    let q_h2_cmd = exact_command(u_prev[0], du_raw[0], cfg.u_lb[0], cfg.u_ub[0], cfg.du_lb[0], cfg.du_ub[0]);
    let q_air_cmd = exact_command(u_prev[1], du_raw[1], cfg.u_lb[1], cfg.u_ub[1], cfg.du_lb[1], cfg.du_ub[1]);
    let slack_used = (0..cfg.hp).map(|j| z[2 * cfg.hu + j]).fold(0.0, f64::max);
    Ok(CtrlOutput {
        q_h2_cmd,
        q_air_cmd,
        du: [q_h2_cmd - u_prev[0], q_air_cmd - u_prev[1]],
        slack_used,
        qp_status: sol.status,
        qp_iterations: sol.iterations,
        fallback: !usable,
        predicted_v: v.eval(&z).iter().copied().collect(),
        predicted_p: p.eval(&z).iter().copied().collect(),
        solution: sol,
    })
}

/// GP-based controller move: linearize at the measurement, solve, apply.
#[allow(clippy::too_many_arguments)]
pub fn control_step(
    fv: &GpModel,
    fp: &GpModel,
    meas: &Measurement,
    input_now: &PlantInput,
    d_i: f64,
    u_prev: [f64; 2],
    cfg: &MpcConfig,
    warm: Option<&QpSolution>,
) -> Result<CtrlOutput> {
    let lin = linearize_gp(fv, fp, meas, input_now)?;
    let x0 = CtrlState {
        v_fc: meas.v_fc,
        p_h2: meas.p_h2,
        d_i,
        q_h2: u_prev[0],
        q_air: u_prev[1],
    };
    control_from_model(&lin, &x0, u_prev, cfg, warm)
}
