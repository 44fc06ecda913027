use gpmpc::mpc::MpcConfig;
use gpmpc::plant::{NoiseStd, PlantParams};
use gpmpc::sim::{
    compare, compare_metrics, compute_metrics, ramp_scenario, run, step_scenario, ControllerKind, Metrics,
    MetricsConfig, Scenario, Segment, SegmentKind, SimConfig, SimTrace, TraceRow,
};
use gpmpc::Error;

fn metrics_cfg() -> MetricsConfig {
    MetricsConfig::new(&MpcConfig::default(), &SimConfig::default())
}

fn physical(scenario: &Scenario, sim: &SimConfig) -> SimTrace {
    run(scenario, ControllerKind::Physical, None, &PlantParams::default(), &MpcConfig::default(), sim).unwrap()
}

fn row(t: f64, current: f64, v: f64) -> TraceRow {
    TraceRow {
        t,
        current,
        v_true: v,
        v_meas: v,
        p_h2_true: 1.5,
        p_h2_meas: 1.5,
        q_h2: 250.0,
        q_air: 500.0,
        dq_h2: 0.0,
        dq_air: 0.0,
        slack: 0.0,
        qp_status: "optimal".into(),
        qp_iterations: 1,
        v_pred: v,
        p_pred_peak: 1.5,
        fallback: false,
    }
}

fn synthetic(rows: Vec<TraceRow>) -> SimTrace {
    SimTrace {
        scenario: "synthetic".into(),
        controller: "physical".into(),
        seed: 0,
        dt: 0.5,
        rows,
        fault: None,
    }
}

#[test]
fn quiet_constant_load_holds_voltage() {
    let hold = Scenario {
        name: "hold".into(),
        duration: 30.0,
        segments: vec![Segment {
            kind: SegmentKind::Hold,
            t_start: 0.0,
            t_end: 30.0,
            i_start: 110.0,
            i_end: 110.0,
        }],
        reference: 48.0,
        seed: 1,
    };
    let sim = SimConfig {
        noise: NoiseStd {
            voltage: 0.0,
            pressure: 0.0,
        },
        ..SimConfig::default()
    };
    let trace = physical(&hold, &sim);
    let v0 = trace.rows[0].v_true;
    assert!(trace.rows.iter().all(|r| (r.v_true - v0).abs() <= 0.05));
}

#[test]
fn same_seed_same_trace() {
    let s = step_scenario();
    let a = physical(&s, &SimConfig::default());
    let b = physical(&s, &SimConfig::default());
    assert_eq!(a, b);
    let mut other = s.clone();
    other.seed += 1;
    assert_ne!(physical(&other, &SimConfig::default()).rows, a.rows);
}

#[test]
fn trace_respects_boxes_and_grid() {
    let cfg = MpcConfig::default();
    for s in [step_scenario(), ramp_scenario()] {
        let trace = physical(&s, &SimConfig::default());
        assert!(trace.fault.is_none());
        assert_eq!(trace.rows.len(), 241);
        let mut prev = [SimConfig::default().initial_q_h2, SimConfig::default().initial_q_air];
        for (k, r) in trace.rows.iter().enumerate() {
            assert_eq!(r.t, k as f64 * 0.5);
            let u = [r.q_h2, r.q_air];
            for f in 0..2 {
                assert!(u[f] >= cfg.u_lb[f] && u[f] <= cfg.u_ub[f]);
                assert!(u[f] - prev[f] >= cfg.du_lb[f] && u[f] - prev[f] <= cfg.du_ub[f]);
            }
            prev = u;
        }
        let m = compute_metrics(&trace, &metrics_cfg()).unwrap();
        assert_eq!(m.rate_violations, 0);
        assert_eq!(m.bound_violations, 0);
    }
}

#[test]
fn step_load_saturates_rate_limit() {
    let trace = physical(&step_scenario(), &SimConfig::default());
    let k = trace.rows.iter().position(|r| r.t == 25.0).unwrap();
    let r = &trace.rows[k];
    let hit = |d: f64| (d - 20.0).abs() < 1e-9;
    assert!(hit(r.dq_h2) || hit(r.dq_air), "{} {}", r.dq_h2, r.dq_air);
}

#[test]
fn step_scenario_profile() {
    let s = step_scenario();
    assert_eq!(s.current_at(74.9), 120.0);
    assert_eq!(s.current_at(75.1), 110.0);
    assert_eq!(s.reference, 48.0);
    assert_eq!(s.current_bounds(), (110.0, 120.0));
    assert_eq!(s.duration, 120.0);
}

#[test]
fn ramp_scenario_profile() {
    let s = ramp_scenario();
    assert!(s.segments.iter().any(|g| g.kind == SegmentKind::Ramp));
    assert!(s.segments.iter().any(|g| g.kind == SegmentKind::Step));
    let (lo, hi) = s.current_bounds();
    assert!(lo >= 110.0 && hi <= 120.0);
    for g in s.segments.iter().filter(|g| g.kind == SegmentKind::Ramp) {
        let eps = 1e-9;
        assert!((s.current_at(g.t_start - eps) - s.current_at(g.t_start)).abs() < 1e-6);
        assert!((s.current_at(g.t_end - eps) - s.current_at(g.t_end)).abs() < 1e-6);
    }
    s.validate(&PlantParams::default()).unwrap();
}

#[test]
fn settle_time_matches_first_order_response() {
    let (r, amp, tau, t0, dt) = (48.0, 0.8, 2.0, 10.0, 0.5);
    let band = metrics_cfg().settle_band;
    let mut rows = Vec::new();
    for k in 0..=120 {
        let t = k as f64 * dt;
        let (i, v) = if t < t0 { (110.0, r) } else { (120.0, r - amp * (-(t - t0) / tau).exp()) };
        rows.push(row(t, i, v));
    }
    let m = compute_metrics(&synthetic(rows.clone()), &metrics_cfg()).unwrap();
    let analytic = tau * (amp / band).ln();
    let settle = m.settle_time.unwrap();
    assert!(settle >= analytic - dt && settle <= analytic + dt, "{settle} vs {analytic}");

    // Appending settled samples changes nothing.
    let mut longer = rows;
    for k in 121..=200 {
        longer.push(row(k as f64 * dt, 120.0, r));
    }
    let m2 = compute_metrics(&synthetic(longer), &metrics_cfg()).unwrap();
    assert_eq!(m2.overshoot, m.overshoot);
    assert_eq!(m2.settle_time, m.settle_time);
}

#[test]
fn trace_csv_round_trip() {
    let trace = physical(&step_scenario(), &SimConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    trace.write_csv(&path).unwrap();
    assert_eq!(SimTrace::read_csv(&path).unwrap(), trace);
}

fn metrics(overshoot: f64, settle: f64) -> Metrics {
    Metrics {
        overshoot,
        settle_time: Some(settle),
        p_violation_max: -0.1,
        rate_violations: 0,
        bound_violations: 0,
        steady_rmse: 0.01,
        onsets: vec![25.0],
        settle_times: vec![Some(settle)],
        overshoots: vec![overshoot],
    }
}

#[test]
fn headline_ratios_from_published_numbers() {
    let c = compare_metrics("step", 0, &metrics(0.42, 5.2), &metrics(0.60, 6.5));
    assert!((c.overshoot_ratio - 1.43).abs() < 0.005);
    assert!((c.settle_ratio.unwrap() - 1.25).abs() < 1e-12);
    let table = c.to_table();
    assert!(table.contains("p_violation_atm") && table.contains("rate_violations"));
}

#[test]
fn identical_runs_have_unit_ratios_and_mismatches_are_rejected() {
    let a = physical(&step_scenario(), &SimConfig::default());
    let c = compare(&a, &a, &metrics_cfg()).unwrap();
    assert_eq!(c.overshoot_ratio, 1.0);
    assert_eq!(c.settle_ratio, Some(1.0));
    assert_eq!(c.steady_rmse_ratio, 1.0);

    let mut b = a.clone();
    b.seed += 1;
    assert!(matches!(compare(&a, &b, &metrics_cfg()), Err(Error::Input(_))));
    let mut b = a.clone();
    b.scenario = "ramp".into();
    assert!(matches!(compare(&a, &b, &metrics_cfg()), Err(Error::Input(_))));
}
