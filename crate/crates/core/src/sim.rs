//! Closed-loop load scenarios, metrics and controller comparison.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::mpc::{self, CtrlOutput, CtrlState, MpcConfig, PLANT_PROBE};
use crate::plant::{measure_with, NoiseStd, Plant, PlantInput, PlantParams};
use crate::qp::{QpSolution, QpStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Step,
    Ramp,
    Hold,
}

/// Load over `[t_start, t_end)`. Step and hold segments are constant at
/// `i_start`; ramps interpolate linearly to `i_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub t_start: f64,
    pub t_end: f64,
    pub i_start: f64,
    pub i_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub duration: f64,
    pub segments: Vec<Segment>,
    pub reference: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self, plant: &PlantParams) -> Result<()> {
        let first = self
            .segments
            .first()
            .ok_or_else(|| Error::Input(format!("scenario {} has no segments", self.name)))?;
        if first.t_start != 0.0 {
            return Err(Error::Input("first segment must start at t = 0".into()));
        }
        let limit = plant.stack.j_max * plant.stack.a_mem;
        for (k, s) in self.segments.iter().enumerate() {
            if !(s.t_end > s.t_start) {
                return Err(Error::Input(format!("segment {k} has non-positive length")));
            }
            if k > 0 && self.segments[k - 1].t_end != s.t_start {
                return Err(Error::Input(format!("segment {k} is not contiguous with its predecessor")));
            }
            if s.kind != SegmentKind::Ramp && s.i_start != s.i_end {
                return Err(Error::Input(format!("segment {k} is constant but has i_start != i_end")));
            }
            for i in [s.i_start, s.i_end] {
                if !(i > 0.0 && i < limit) {
                    return Err(Error::Input(format!("segment {k} current {i} A outside (0, {limit})")));
                }
            }
        }
        if self.segments.last().map(|s| s.t_end) != Some(self.duration) {
            return Err(Error::Input("segments must end at the scenario duration".into()));
        }
        Ok(())
    }

    /// Load current at time `t`; times past the end hold the last value.
    pub fn current_at(&self, t: f64) -> f64 {
        let seg = self
            .segments
            .iter()
            .find(|s| t >= s.t_start && t < s.t_end)
            .or(self.segments.last())
            .expect("scenario has segments");
        match seg.kind {
            SegmentKind::Ramp => {
                let f = ((t - seg.t_start) / (seg.t_end - seg.t_start)).clamp(0.0, 1.0);
                seg.i_start + f * (seg.i_end - seg.i_start)
            }
            _ => seg.i_start,
        }
    }

    pub fn current_bounds(&self) -> (f64, f64) {
        self.segments.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.i_start.min(s.i_end)), hi.max(s.i_start.max(s.i_end)))
        })
    }
}

fn constant(kind: SegmentKind, t_start: f64, t_end: f64, i: f64) -> Segment {
    Segment {
        kind,
        t_start,
        t_end,
        i_start: i,
        i_end: i,
    }
}

/// 110 A, step to 120 A at 25 s, back to 110 A at 75 s, 120 s total.
pub fn step_scenario() -> Scenario {
    Scenario {
        name: "step".into(),
        duration: 120.0,
        segments: vec![
            constant(SegmentKind::Hold, 0.0, 25.0, 110.0),
            constant(SegmentKind::Step, 25.0, 75.0, 120.0),
            constant(SegmentKind::Step, 75.0, 120.0, 110.0),
        ],
        reference: 48.0,
        seed: 11,
    }
}

/// 110 A, ramp to 120 A over 20..40 s, hold, step to 112 A at 70 s, 120 s total.
pub fn ramp_scenario() -> Scenario {
    Scenario {
        name: "ramp".into(),
        duration: 120.0,
        segments: vec![
            constant(SegmentKind::Hold, 0.0, 20.0, 110.0),
            Segment {
                kind: SegmentKind::Ramp,
                t_start: 20.0,
                t_end: 40.0,
                i_start: 110.0,
                i_end: 120.0,
            },
            constant(SegmentKind::Hold, 40.0, 70.0, 120.0),
            constant(SegmentKind::Step, 70.0, 120.0, 112.0),
        ],
        reference: 48.0,
        seed: 11,
    }
}

pub fn scenario_by_name(name: &str) -> Result<Scenario> {
    match name {
        "step" => Ok(step_scenario()),
        "ramp" => Ok(ramp_scenario()),
        other => Err(Error::Input(format!("unknown scenario {other:?} (expected step or ramp)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Gp,
    Physical,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Gp => "gp",
            ControllerKind::Physical => "physical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(ControllerKind::Gp),
            "physical" => Ok(ControllerKind::Physical),
            other => Err(Error::Input(format!("unknown controller {other:?} (expected gp or physical)"))),
        }
    }
}

/// Closed-loop settings that are not part of the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub noise: NoiseStd,
    /// Flows the plant rests at before t = 0, lpm.
    pub initial_q_h2: f64,
    pub initial_q_air: f64,
    pub settle_band: f64,
    /// Time the voltage must stay inside the band to count as settled, s.
    pub settle_hold: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            noise: NoiseStd::default(),
            initial_q_h2: 250.0,
            initial_q_air: 500.0,
            settle_band: 0.1,
            settle_hold: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, mpc: &MpcConfig) -> Result<()> {
        self.noise.validate()?;
        let inside = |q: f64, f: usize| q >= mpc.u_lb[f] && q <= mpc.u_ub[f];
        if !(inside(self.initial_q_h2, 0) && inside(self.initial_q_air, 1)) {
            return Err(Error::Config("initial flows must lie inside the flow bounds".into()));
        }
        if !(self.settle_band > 0.0 && self.settle_hold >= 0.0) {
            return Err(Error::Config("settle_band must be > 0 and settle_hold >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    /// Load applied from `t` to the next sample, A.
    pub current: f64,
    /// Stack voltage sampled at `t`, before the new load takes effect.
    pub v_true: f64,
    pub v_meas: f64,
    pub p_h2_true: f64,
    pub p_h2_meas: f64,
    pub q_h2: f64,
    pub q_air: f64,
    pub dq_h2: f64,
    pub dq_air: f64,
    pub slack: f64,
    pub qp_status: String,
    pub qp_iterations: usize,
    /// One-step-ahead voltage predicted by the controller.
    pub v_pred: f64,
    /// Largest pressure in the planned trajectory.
    pub p_pred_peak: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub scenario: String,
    pub controller: String,
    pub seed: u64,
    pub dt: f64,
    pub rows: Vec<TraceRow>,
    /// Set when the run stopped early on a plant fault.
    pub fault: Option<String>,
}

/// Models used by the GP controller.
#[derive(Debug, Clone, Copy)]
pub struct GpPair<'a> {
    pub voltage: &'a GpModel,
    pub pressure: &'a GpModel,
}

/// Run one scenario in closed loop.
pub fn run(
    scenario: &Scenario,
    controller: ControllerKind,
    models: Option<GpPair<'_>>,
    plant_params: &PlantParams,
    mpc_cfg: &MpcConfig,
    sim_cfg: &SimConfig,
) -> Result<SimTrace> {
    plant_params.validate()?;
    mpc_cfg.validate()?;
    sim_cfg.validate(mpc_cfg)?;
    scenario.validate(plant_params)?;
    if controller == ControllerKind::Gp && models.is_none() {
        return Err(Error::Input("the gp controller needs trained models".into()));
    }

    let dt = mpc_cfg.dt;
    let n_steps = (scenario.duration / dt).round() as usize;
    let i0 = scenario.current_at(0.0);
    let mut u_prev = [sim_cfg.initial_q_h2, sim_cfg.initial_q_air];
    let mut plant = Plant::at_steady_state(*plant_params, &PlantInput::new(u_prev[0], u_prev[1], i0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut warm: Option<QpSolution> = None;
    let mut i_prev = i0;
    let mut trace = SimTrace {
        scenario: scenario.name.clone(),
        controller: controller.as_str().into(),
        seed: scenario.seed,
        dt,
        rows: Vec::with_capacity(n_steps + 1),
        fault: None,
    };

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        let i_now = scenario.current_at(t);
        let held = PlantInput::new(u_prev[0], u_prev[1], i_prev);
        let step = |plant: &Plant, rng: &mut ChaCha8Rng, warm: Option<&QpSolution>| -> Result<(f64, _, CtrlOutput)> {
            let v_true = plant.voltage(&held)?;
            let meas = measure_with(&plant.params.stack, &plant.state, &held, &sim_cfg.noise, rng)?;
            let input_now = PlantInput::new(u_prev[0], u_prev[1], i_now);
            let out = match controller {
                ControllerKind::Gp => {
                    let m = models.expect("checked above");
                    mpc::control_step(m.voltage, m.pressure, &meas, &input_now, i_now - i_prev, u_prev, mpc_cfg, warm)?
                }
                ControllerKind::Physical => {
                    let lin = mpc::linearize_plant(&plant.params, &plant.state, &input_now, dt, PLANT_PROBE)?;
                    let x0 = CtrlState {
                        v_fc: meas.v_fc,
                        p_h2: meas.p_h2,
                        d_i: i_now - i_prev,
                        q_h2: u_prev[0],
                        q_air: u_prev[1],
                    };
                    mpc::control_from_model(&lin, &x0, u_prev, mpc_cfg, warm)?
                }
            };
            Ok((v_true, meas, out))
        };
        let (v_true, meas, out) = match step(&plant, &mut rng, warm.as_ref()) {
            Ok(v) => v,
            Err(e) if e.is_plant_fault() => {
                trace.fault = Some(format!("t={t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };

        trace.rows.push(TraceRow {
            t,
            current: i_now,
            v_true,
            v_meas: meas.v_fc,
            p_h2_true: plant.state.p_h2,
            p_h2_meas: meas.p_h2,
            q_h2: out.q_h2_cmd,
            q_air: out.q_air_cmd,
            dq_h2: out.du[0],
            dq_air: out.du[1],
            slack: out.slack_used,
            qp_status: if out.fallback { "fallback".into() } else { out.qp_status.as_str().into() },
            qp_iterations: out.qp_iterations,
            v_pred: out.predicted_v.first().copied().unwrap_or(f64::NAN),
            p_pred_peak: out.predicted_p_peak(),
            fallback: out.fallback,
        });
        u_prev = [out.q_h2_cmd, out.q_air_cmd];
        i_prev = i_now;
        if out.qp_status != QpStatus::Infeasible {
            warm = Some(out.solution);
        }
        if k == n_steps {
            break;
        }
        if let Err(e) = plant.advance(&PlantInput::new(u_prev[0], u_prev[1], i_now), dt) {
            if e.is_plant_fault() {
                trace.fault = Some(format!("t={t}: {e}"));
                break;
            }
            return Err(e);
        }
    }
    Ok(trace)
}

/// Bounds used to count input violations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub reference: f64,
    pub settle_band: f64,
    pub settle_hold: f64,
    pub p_limit: f64,
    pub u_lb: [f64; 2],
    pub u_ub: [f64; 2],
    pub du_lb: [f64; 2],
    pub du_ub: [f64; 2],
}

impl MetricsConfig {
    pub fn new(mpc: &MpcConfig, sim: &SimConfig) -> Self {
        MetricsConfig {
            reference: mpc.r,
            settle_band: sim.settle_band,
            settle_hold: sim.settle_hold,
            p_limit: mpc.p_limit,
            u_lb: mpc.u_lb,
            u_ub: mpc.u_ub,
            du_lb: mpc.du_lb,
            du_ub: mpc.du_ub,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub overshoot: f64,
    /// Longest settling time over all disturbance onsets; `None` if some
    /// onset never settled.
    pub settle_time: Option<f64>,
    pub p_violation_max: f64,
    pub rate_violations: usize,
    pub bound_violations: usize,
    pub steady_rmse: f64,
    pub onsets: Vec<f64>,
    pub settle_times: Vec<Option<f64>>,
    pub overshoots: Vec<f64>,
}

/// Sample indices where the load starts to change after being constant.
fn onset_indices(rows: &[TraceRow]) -> Vec<usize> {
    (1..rows.len())
        .filter(|&k| rows[k].current != rows[k - 1].current && (k < 2 || rows[k - 1].current == rows[k - 2].current))
        .collect()
}

/// First index of the final in-band stretch of `v[start..end]`, if it lasts
/// at least `hold` seconds or reaches the end of the run.
fn settle_index(v: &[f64], start: usize, end: usize, r: f64, band: f64) -> Option<usize> {
    let mut first = end;
    for k in (start..end).rev() {
        if (v[k] - r).abs() <= band {
            first = k;
        } else {
            break;
        }
    }
    (first < end).then_some(first)
}

pub fn compute_metrics(trace: &SimTrace, cfg: &MetricsConfig) -> Result<Metrics> {
    let rows = &trace.rows;
    if rows.is_empty() {
        return Err(Error::Input("cannot compute metrics of an empty trace".into()));
    }
    let r = cfg.reference;
    let v: Vec<f64> = rows.iter().map(|row| row.v_true).collect();
    let n = rows.len();
    let onsets = onset_indices(rows);
    let mut windows: Vec<(usize, usize)> = Vec::new();
    if onsets.is_empty() {
        windows.push((0, n));
    } else {
        for (w, &s) in onsets.iter().enumerate() {
            windows.push((s, onsets.get(w + 1).copied().unwrap_or(n)));
        }
    }

    let mut settle_times = Vec::new();
    let mut overshoots = Vec::new();
    for &(s, e) in &windows {
        let os = match (s..e).find(|&k| v[k] >= r) {
            Some(c) => v[c..e].iter().fold(0.0_f64, |m, x| m.max(x - r)),
            None => 0.0,
        };
        overshoots.push(os);
        let settled = settle_index(&v, s, e, r, cfg.settle_band).filter(|&k| {
            let reaches_end = e == n;
            reaches_end || (e - k) as f64 * trace.dt >= cfg.settle_hold
        });
        settle_times.push(settled.map(|k| rows[k].t - rows[s].t));
    }
    let settle_time = settle_times
        .iter()
        .try_fold(0.0_f64, |m, s| s.map(|s| m.max(s)));

    let mut rate_violations = 0;
    let mut bound_violations = 0;
    for (k, row) in rows.iter().enumerate() {
        let q = [row.q_h2, row.q_air];
        for f in 0..2 {
            if q[f] < cfg.u_lb[f] || q[f] > cfg.u_ub[f] {
                bound_violations += 1;
            }
        }
        if k > 0 {
            let prev = [rows[k - 1].q_h2, rows[k - 1].q_air];
            for f in 0..2 {
                let d = q[f] - prev[f];
                if d < cfg.du_lb[f] || d > cfg.du_ub[f] {
                    rate_violations += 1;
                }
            }
        }
    }

    let p_violation_max = rows
        .iter()
        .map(|row| row.p_h2_true - cfg.p_limit)
        .fold(f64::NEG_INFINITY, f64::max);
    let tail_start = n - (n as f64 * 0.2).ceil().max(1.0) as usize;
    let tail = &v[tail_start..];
    let steady_rmse = (tail.iter().map(|x| (x - r).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();

    Ok(Metrics {
        overshoot: overshoots.iter().copied().fold(0.0, f64::max),
        settle_time,
        p_violation_max,
        rate_violations,
        bound_violations,
        steady_rmse,
        onsets: onsets.iter().map(|&k| rows[k].t).collect(),
        settle_times,
        overshoots,
    })
}

impl Metrics {
    /// Flat `key=value` lines.
    pub fn to_key_value(&self, trace: &SimTrace) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario={}", trace.scenario);
        let _ = writeln!(s, "controller={}", trace.controller);
        let _ = writeln!(s, "seed={}", trace.seed);
        let _ = writeln!(s, "overshoot={}", self.overshoot);
        let _ = writeln!(s, "settle_time={}", fmt_opt(self.settle_time));
        let _ = writeln!(s, "p_violation_max={}", self.p_violation_max);
        let _ = writeln!(s, "rate_violations={}", self.rate_violations);
        let _ = writeln!(s, "bound_violations={}", self.bound_violations);
        let _ = writeln!(s, "steady_rmse={}", self.steady_rmse);
        let _ = writeln!(s, "fault={}", trace.fault.as_deref().unwrap_or("none"));
        s
    }

    pub fn to_json(&self, trace: &SimTrace) -> String {
        let value = serde_json::json!({
            "scenario": trace.scenario,
            "controller": trace.controller,
            "seed": trace.seed,
            "fault": trace.fault,
            "metrics": self,
        });
        serde_json::to_string_pretty(&value).expect("metrics serialize")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |v| v.to_string())
}

/// Ratios GP-MPC over MPC; 0/0 counts as 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub scenario: String,
    pub seed: u64,
    pub overshoot_ratio: f64,
    pub settle_ratio: Option<f64>,
    pub p_violation_mpc: f64,
    pub p_violation_gpmpc: f64,
    pub steady_rmse_ratio: f64,
    pub rate_violations_mpc: usize,
    pub rate_violations_gpmpc: usize,
    pub mpc: Metrics,
    pub gpmpc: Metrics,
}

pub fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 && den == 0.0 {
        1.0
    } else {
        num / den
    }
}

pub fn compare_metrics(scenario: &str, seed: u64, mpc: &Metrics, gpmpc: &Metrics) -> Comparison {
    Comparison {
        scenario: scenario.into(),
        seed,
        overshoot_ratio: ratio(gpmpc.overshoot, mpc.overshoot),
        settle_ratio: match (gpmpc.settle_time, mpc.settle_time) {
            (Some(a), Some(b)) => Some(ratio(a, b)),
            _ => None,
        },
        p_violation_mpc: mpc.p_violation_max,
        p_violation_gpmpc: gpmpc.p_violation_max,
        steady_rmse_ratio: ratio(gpmpc.steady_rmse, mpc.steady_rmse),
        rate_violations_mpc: mpc.rate_violations,
        rate_violations_gpmpc: gpmpc.rate_violations,
        mpc: mpc.clone(),
        gpmpc: gpmpc.clone(),
    }
}

pub fn compare(trace_mpc: &SimTrace, trace_gpmpc: &SimTrace, cfg: &MetricsConfig) -> Result<Comparison> {
    if trace_mpc.scenario != trace_gpmpc.scenario || trace_mpc.seed != trace_gpmpc.seed {
        return Err(Error::Input(format!(
            "runs differ: {} seed {} vs {} seed {}",
            trace_mpc.scenario, trace_mpc.seed, trace_gpmpc.scenario, trace_gpmpc.seed
        )));
    }
    if trace_mpc.rows.len() != trace_gpmpc.rows.len() || trace_mpc.dt != trace_gpmpc.dt {
        return Err(Error::Input("runs have different time grids".into()));
    }
    let a = compute_metrics(trace_mpc, cfg)?;
    let b = compute_metrics(trace_gpmpc, cfg)?;
    Ok(compare_metrics(&trace_mpc.scenario, trace_mpc.seed, &a, &b))
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario={} seed={}", self.scenario, self.seed);
        let _ = writeln!(s, "{:<18} {:>12} {:>12} {:>10}", "metric", "mpc", "gp-mpc", "ratio");
        let _ = writeln!(
            s,
            "{:<18} {:>12.4} {:>12.4} {:>10.3}",
            "overshoot_V", self.mpc.overshoot, self.gpmpc.overshoot, self.overshoot_ratio
        );
        let _ = writeln!(
            s,
            "{:<18} {:>12} {:>12} {:>10}",
            "settle_time_s",
            fmt_opt(self.mpc.settle_time),
            fmt_opt(self.gpmpc.settle_time),
            self.settle_ratio.map_or_else(|| "none".into(), |r| format!("{r:.3}"))
        );
        let _ = writeln!(
            s,
            "{:<18} {:>12.4} {:>12.4} {:>10}",
            "p_violation_atm", self.p_violation_mpc, self.p_violation_gpmpc, "-"
        );
        let _ = writeln!(
            s,
            "{:<18} {:>12} {:>12} {:>10}",
            "rate_violations", self.rate_violations_mpc, self.rate_violations_gpmpc, "-"
        );
        let _ = writeln!(
            s,
            "{:<18} {:>12.4} {:>12.4} {:>10.3}",
            "steady_rmse_V", self.mpc.steady_rmse, self.gpmpc.steady_rmse, self.steady_rmse_ratio
        );
        s
    }
}

const TRACE_HEADER: [&str; 19] = [
    "t",
    "current",
    "v_true",
    "v_meas",
    "p_h2_true",
    "p_h2_meas",
    "q_h2",
    "q_air",
    "dq_h2",
    "dq_air",
    "slack",
    "qp_status",
    "qp_iterations",
    "v_pred",
    "p_pred_peak",
    "fallback",
    "scenario",
    "controller",
    "seed",
];

impl SimTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(TRACE_HEADER)?;
        let f = |v: f64| format!("{v:?}");
        for r in &self.rows {
            w.write_record([
                f(r.t),
                f(r.current),
                f(r.v_true),
                f(r.v_meas),
                f(r.p_h2_true),
                f(r.p_h2_meas),
                f(r.q_h2),
                f(r.q_air),
                f(r.dq_h2),
                f(r.dq_air),
                f(r.slack),
                r.qp_status.clone(),
                r.qp_iterations.to_string(),
                f(r.v_pred),
                f(r.p_pred_peak),
                r.fallback.to_string(),
                self.scenario.clone(),
                self.controller.clone(),
                self.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        if rd.headers()?.iter().ne(TRACE_HEADER.iter().copied()) {
            return Err(Error::Parse(format!("{}: not a simulation trace", path.display())));
        }
        let mut trace = SimTrace {
            scenario: String::new(),
            controller: String::new(),
            seed: 0,
            dt: 0.0,
            rows: Vec::new(),
            fault: None,
        };
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Parse(format!("{} row {}: bad {what}", path.display(), line + 2));
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(TRACE_HEADER[i]));
            trace.rows.push(TraceRow {
                t: num(0)?,
                current: num(1)?,
                v_true: num(2)?,
                v_meas: num(3)?,
                p_h2_true: num(4)?,
                p_h2_meas: num(5)?,
                q_h2: num(6)?,
                q_air: num(7)?,
                dq_h2: num(8)?,
                dq_air: num(9)?,
                slack: num(10)?,
                qp_status: rec[11].to_string(),
                qp_iterations: rec[12].parse().map_err(|_| bad("qp_iterations"))?,
                v_pred: num(13)?,
                p_pred_peak: num(14)?,
                fallback: rec[15].parse().map_err(|_| bad("fallback"))?,
            });
            trace.scenario = rec[16].to_string();
            trace.controller = rec[17].to_string();
            trace.seed = rec[18].parse().map_err(|_| bad("seed"))?;
        }
        if trace.rows.len() >= 2 {
            trace.dt = trace.rows[1].t - trace.rows[0].t;
        }
        Ok(trace)
    }
}

/// Write `voltage.svg`, `pressure.svg` and `inputs.svg` into `dir` with the
/// given file prefix.
pub fn write_plots(trace: &SimTrace, cfg: &MetricsConfig, dir: &Path, prefix: &str) -> Result<()> {
    use plotters::prelude::*;
    let t: Vec<f64> = trace.rows.iter().map(|r| r.t).collect();
    let t_max = t.last().copied().unwrap_or(1.0).max(1.0);
    let plot_err = |e: &dyn std::fmt::Display| Error::Io(std::io::Error::other(e.to_string()));

    let chart = |file: &str,
                 title: &str,
                 series: &[(&str, Vec<f64>, RGBColor)],
                 level: Option<(&str, f64)>|
     -> Result<()> {
        let path = dir.join(format!("{prefix}{file}"));
        let root = SVGBackend::new(&path, (900, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let (mut lo, mut hi) = series
            .iter()
            .flat_map(|s| s.1.iter().copied())
            .chain(level.map(|l| l.1))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !(hi > lo) {
            lo -= 1.0;
            hi += 1.0;
        }
        let pad = 0.05 * (hi - lo);
        let mut ch = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(55)
            .build_cartesian_2d(0.0..t_max, (lo - pad)..(hi + pad))
            .map_err(|e| plot_err(&e))?;
        ch.configure_mesh().x_desc("t [s]").draw().map_err(|e| plot_err(&e))?;
        for (name, ys, color) in series {
            let color = *color;
            ch.draw_series(LineSeries::new(t.iter().copied().zip(ys.iter().copied()), color))
                .map_err(|e| plot_err(&e))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
        }
        if let Some((name, v)) = level {
            ch.draw_series(LineSeries::new(vec![(0.0, v), (t_max, v)], BLACK))
                .map_err(|e| plot_err(&e))?
                .label(name)
                .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], BLACK));
        }
        ch.configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
        Ok(())
    };

    let col = |f: fn(&TraceRow) -> f64| trace.rows.iter().map(f).collect::<Vec<f64>>();
    let label = format!("{} / {}", trace.scenario, trace.controller);
    chart(
        "voltage.svg",
        &format!("Stack voltage ({label})"),
        &[("V measured", col(|r| r.v_meas), RGBColor(170, 170, 220)), ("V true", col(|r| r.v_true), BLUE)],
        Some(("reference", cfg.reference)),
    )?;
    chart(
        "pressure.svg",
        &format!("Hydrogen pressure ({label})"),
        &[("P_H2 true", col(|r| r.p_h2_true), RED)],
        Some(("limit", cfg.p_limit)),
    )?;
    chart(
        "inputs.svg",
        &format!("Flow commands ({label})"),
        &[("Q_H2", col(|r| r.q_h2), RED), ("Q_air", col(|r| r.q_air), BLUE)],
        None,
    )?;
    Ok(())
}
