mod common;

use std::collections::HashSet;

use common::*;
use gpmpc::gp::{gram, Dataset, GpModel, KernelParams};
use gpmpc::plant::{measure_with, NoiseStd, Plant, PlantInput, PlantParams, NOMINAL_INPUT};
use gpmpc::training::{
    collect, generate, lhs_sample, optimize_hyperparams, predict_set, report_from_points, RegressionSet,
    SamplingSpec, Target, TrainConfig,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn nominal_plant() -> Plant {
    Plant::at_steady_state(PlantParams::default(), &NOMINAL_INPUT).unwrap()
}

const QUIET: NoiseStd = NoiseStd {
    voltage: 0.0,
    pressure: 0.0,
};

#[test]
fn lhs_stays_in_bounds() {
    let spec = SamplingSpec {
        n_samples: 1000,
        ..SamplingSpec::default()
    };
    let x = lhs_sample(&spec).unwrap();
    assert_eq!(x.shape(), (1000, 3));
    for (j, (lo, hi)) in spec.ranges().into_iter().enumerate() {
        assert!(x.column(j).iter().all(|v| *v >= lo && *v <= hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lhs_fills_every_stratum_once(n in 2usize..300, seed in any::<u64>()) {
        let spec = SamplingSpec { n_samples: n, seed, ..SamplingSpec::default() };
        let x = lhs_sample(&spec).unwrap();
        for (j, (lo, hi)) in spec.ranges().into_iter().enumerate() {
            let mut count = vec![0usize; n];
            for v in x.column(j).iter() {
                let k = (((v - lo) / (hi - lo)) * n as f64).floor() as usize;
                count[k.min(n - 1)] += 1;
            }
            prop_assert!(count.iter().all(|&c| c == 1));
        }
    }
}

#[test]
fn lag_structure_and_manual_step() {
    let plant = nominal_plant();
    let seq = DMatrix::from_row_slice(4, 3, &[260.0, 480.0, 112.0, 230.0, 520.0, 118.0, 300.0, 450.0, 105.0, 180.0, 600.0, 125.0]);
    let c = collect(&plant, &seq, 0.5, &QUIET, 5).unwrap();
    assert_eq!(c.voltage.n(), 3);
    assert_eq!(c.pressure.n(), 3);
    assert_eq!(c.skipped, 0);

    // Replay the first two holds by hand.
    let p = plant.params;
    let u0 = PlantInput::new(260.0, 480.0, 112.0);
    let u1 = PlantInput::new(230.0, 520.0, 118.0);
    let s0 = p.step(&plant.state, &u0, 0.5).unwrap();
    let s1 = p.step(&s0, &u1, 0.5).unwrap();
    let v0 = p.output_voltage(&s0, &u0).unwrap();
    let v1 = p.output_voltage(&s1, &u1).unwrap();
    assert_eq!(c.voltage.row(0), [230.0, 520.0, 118.0, v0]);
    assert_eq!(c.voltage.targets[0], v1);
    assert_eq!(c.pressure.row(0), [230.0, 520.0, 118.0, s0.p_h2]);
    assert_eq!(c.pressure.targets[0], s1.p_h2);
}

#[test]
fn faulted_samples_are_skipped() {
    let plant = nominal_plant();
    let seq = DMatrix::from_row_slice(4, 3, &[250.0, 500.0, 110.0, 250.0, 500.0, 1e5, 250.0, 500.0, 112.0, 250.0, 500.0, 114.0]);
    let c = collect(&plant, &seq, 0.5, &QUIET, 5).unwrap();
    assert_eq!(c.skipped, 1);
    assert_eq!(c.voltage.n(), 2);
    // The pair straddling the fault links the samples on either side of it.
    assert_eq!(c.voltage.row(0)[2], 112.0);
}

#[test]
fn collection_is_reproducible() {
    let plant = nominal_plant();
    let spec = SamplingSpec {
        n_samples: 40,
        ..SamplingSpec::default()
    };
    let a = generate(&plant, &spec, &NoiseStd::default()).unwrap();
    let b = generate(&plant, &spec, &NoiseStd::default()).unwrap();
    assert_eq!(a.voltage, b.voltage);
    assert_eq!(a.pressure, b.pressure);
    let c = generate(&plant, &spec, &QUIET).unwrap();
    let d = generate(&plant, &spec, &QUIET).unwrap();
    assert_eq!(c.voltage, d.voltage);
}

#[test]
fn default_train_and_test_inputs_are_disjoint() {
    let train = lhs_sample(&SamplingSpec::default()).unwrap();
    let test = lhs_sample(&SamplingSpec {
        n_samples: 301,
        seed: 2,
        ..SamplingSpec::default()
    })
    .unwrap();
    let key = |x: &DMatrix<f64>, i: usize| [x[(i, 0)].to_bits(), x[(i, 1)].to_bits(), x[(i, 2)].to_bits()];
    let seen: HashSet<_> = (0..train.nrows()).map(|i| key(&train, i)).collect();
    assert!((0..test.nrows()).all(|i| !seen.contains(&key(&test, i))));
}

#[test]
fn regression_csv_round_trip() {
    let plant = nominal_plant();
    let spec = SamplingSpec {
        n_samples: 12,
        ..SamplingSpec::default()
    };
    let c = generate(&plant, &spec, &NoiseStd::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.csv");
    c.voltage.write_csv(&path).unwrap();
    assert_eq!(RegressionSet::read_csv(&path, Target::Voltage).unwrap(), c.voltage);
    assert!(RegressionSet::read_csv(&path, Target::Pressure).is_err());
}

/// One draw from a zero-mean GP with a single SE kernel.
fn se_sample(n: usize, length: f64, noise: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, 1, |i, _| 10.0 * i as f64 / (n - 1) as f64 + r.random_range(-0.05..0.05));
    let truth = KernelParams {
        sigma_iso: 1.0,
        l_iso: length,
        sigma_ard: 0.0,
        l_ard: vec![1.0],
        sigma_n: 0.0,
    };
    let k = gram(&truth, &x, &x) + DMatrix::identity(n, n) * 1e-10;
    let l = k.cholesky().unwrap().l();
    let e: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
    let y = l * e + DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        noise * z
    });
    Dataset::new(x, y).unwrap()
}

#[test]
fn recovers_synthetic_length_scale() {
    let truth = 1.5;
    let data = se_sample(30, truth, 0.01, 7);
    let out = optimize_hyperparams(&data, &TrainConfig {
        restarts: 4,
        ..TrainConfig::default()
    })
    .unwrap();
    // In one dimension both kernel terms are SE; judge the one carrying the signal.
    let p = &out.params;
    let l = if p.sigma_iso >= p.sigma_ard { p.l_iso } else { p.l_ard[0] };
    assert!((l - truth).abs() <= 0.2 * truth, "recovered {l}, params {p:?}");
}

#[test]
fn search_improves_on_every_start_and_is_deterministic() {
    let data = se_sample(25, 2.0, 0.05, 8);
    let cfg = TrainConfig {
        restarts: 3,
        ..TrainConfig::default()
    };
    let a = optimize_hyperparams(&data, &cfg).unwrap();
    for r in a.restarts.iter().flatten() {
        assert!(a.lml >= r.init_lml);
        assert!(r.lml >= r.init_lml);
    }
    let b = optimize_hyperparams(&data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.lml, b.lml);
}

#[test]
fn more_restarts_never_hurt() {
    let data = se_sample(20, 1.0, 0.1, 9);
    let mut last = f64::NEG_INFINITY;
    for k in 1..=4 {
        let out = optimize_hyperparams(&data, &TrainConfig {
            restarts: k,
            ..TrainConfig::default()
        })
        .unwrap();
        assert!(out.lml >= last);
        last = out.lml;
    }
}

#[test]
fn perfect_model_scores_perfectly() {
    let x = DMatrix::from_row_slice(3, 4, &[100.0, 300.0, 110.0, 48.0, 200.0, 500.0, 120.0, 47.0, 300.0, 650.0, 105.0, 49.0]);
    let y = DVector::from_column_slice(&[48.1, 47.2, 49.3]);
    let set = RegressionSet::new(x.clone(), y.clone(), Target::Voltage).unwrap();
    let params = KernelParams {
        sigma_iso: 1.0,
        l_iso: 10.0,
        sigma_ard: 1.0,
        l_ard: vec![10.0; 4],
        sigma_n: 0.0,
    };
    let model = GpModel::fit(Dataset::new(x, y).unwrap(), params).unwrap();
    let rep = report_from_points(&predict_set(&model, &set).unwrap()).unwrap();
    assert!(rep.rmse < 1e-9);
    assert_eq!(rep.coverage_1s, 1.0);
    assert_eq!(rep.coverage_2s, 1.0);
}

#[test]
fn measurement_noise_is_unbiased() {
    let plant = nominal_plant();
    let mut r = rng(10);
    let noise = NoiseStd::default();
    let n = 100_000;
    let truth = plant.voltage(&NOMINAL_INPUT).unwrap();
    let mean = (0..n)
        .map(|_| measure_with(&plant.params.stack, &plant.state, &NOMINAL_INPUT, &noise, &mut r).unwrap().v_fc)
        .sum::<f64>()
        / n as f64;
    assert!((mean - truth).abs() <= 3.0 * noise.voltage / (n as f64).sqrt());
}
