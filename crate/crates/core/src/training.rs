//! Excitation design, data collection, hyperparameter search and validation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{Dataset, GpModel, KernelParams, Standardization};
use crate::lbfgs::{self, LbfgsConfig};
use crate::plant::{measure_with, Measurement, NoiseStd, Plant, PlantInput};

/// Latin hypercube design over (Q_H2, Q_air, I).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSpec {
    pub q_h2_range: (f64, f64),
    pub q_air_range: (f64, f64),
    pub current_range: (f64, f64),
    /// Number of input samples; the lag structure yields one fewer regression row.
    pub n_samples: usize,
    /// Hold time per sample, s.
    pub dt: f64,
    pub seed: u64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            q_h2_range: (100.0, 400.0),
            q_air_range: (300.0, 700.0),
            current_range: (100.0, 130.0),
            n_samples: 1001,
            dt: 0.5,
            seed: 1,
        }
    }
}

impl SamplingSpec {
    pub fn ranges(&self) -> [(f64, f64); 3] {
        [self.q_h2_range, self.q_air_range, self.current_range]
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in self.ranges() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("sampling range ({lo}, {hi}) must satisfy low < high")));
            }
        }
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("sampling dt must be > 0".into()));
        }
        Ok(())
    }
}

/// One sample per equal-width stratum in every column; rows are (Q_H2, Q_air, I).
pub fn lhs_sample(spec: &SamplingSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = spec.n_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = DMatrix::zeros(n, 3);
    for (j, (lo, hi)) in spec.ranges().into_iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u: f64 = rng.random();
            let v = lo + (s as f64 + u) / n as f64 * (hi - lo);
            // Rounding can land exactly on the next stratum edge; keep it inside.
            let edge = lo + (s as f64 + 1.0) / n as f64 * (hi - lo);
            out[(i, j)] = if v >= edge { edge.next_down() } else { v };
        }
    }
    Ok(out)
}

/// Which measured quantity a regression set predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Voltage,
    Pressure,
}

impl Target {
    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Voltage => "voltage",
            Target::Pressure => "pressure",
        }
    }

    fn prior_column(&self) -> &'static str {
        match self {
            Target::Voltage => "v_prior",
            Target::Pressure => "p_prior",
        }
    }
}

/// Lagged pairs: row k is (Q_H2, Q_air, I, state_k) and the target is state_{k+1}.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSet {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub which: Target,
}

impl RegressionSet {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>, which: Target) -> Result<Self> {
        if inputs.ncols() != 4 || inputs.nrows() != targets.len() {
            return Err(Error::Input(format!(
                "regression set needs n x 4 inputs and n targets, got {:?} and {}",
                inputs.shape(),
                targets.len()
            )));
        }
        Ok(RegressionSet { inputs, targets, which })
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> [f64; 4] {
        let r = self.inputs.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.inputs.clone(), self.targets.clone())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["q_h2", "q_air", "current", self.which.prior_column(), "target"])?;
        for i in 0..self.n() {
            let r = self.row(i);
            w.write_record([r[0], r[1], r[2], r[3], self.targets[i]].iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, which: Target) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let expected = ["q_h2", "q_air", "current", which.prior_column(), "target"];
        if header.iter().ne(expected.iter().copied()) {
            return Err(Error::Parse(format!(
                "{}: expected columns {expected:?}, found {:?}",
                path.display(),
                header.iter().collect::<Vec<_>>()
            )));
        }
        let mut vals = Vec::new();
        let mut targets = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            let parsed = parsed.map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), line + 2)))?;
            vals.extend_from_slice(&parsed[..4]);
            targets.push(parsed[4]);
        }
        let n = targets.len();
        RegressionSet::new(DMatrix::from_row_slice(n, 4, &vals), DVector::from_vec(targets), which)
    }
}

#[derive(Debug, Clone)]
pub struct Collected {
    pub voltage: RegressionSet,
    pub pressure: RegressionSet,
    /// Samples dropped because the plant faulted while holding them.
    pub skipped: usize,
}

/// Drive `plant` through `seq` (rows of Q_H2, Q_air, I), holding each row for
/// `dt`, and build lagged regression pairs from noisy measurements.
pub fn collect(plant: &Plant, seq: &DMatrix<f64>, dt: f64, noise: &NoiseStd, seed: u64) -> Result<Collected> {
    if seq.ncols() != 3 {
        return Err(Error::Input(format!("input sequence must have 3 columns, got {}", seq.ncols())));
    }
    noise.validate()?;
    let mut plant = *plant;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prior: Option<Measurement> = None;
    let mut rows = Vec::new();
    let mut tv = Vec::new();
    let mut tp = Vec::new();
    let mut skipped = 0;

    for k in 0..seq.nrows() {
        let input = PlantInput::new(seq[(k, 0)], seq[(k, 1)], seq[(k, 2)]);
        let outcome = plant
            .params
            .step(&plant.state, &input, dt)
            .and_then(|s| measure_with(&plant.params.stack, &s, &input, noise, &mut rng).map(|m| (s, m)));
        let (state, m) = match outcome {
            Ok(v) => v,
            Err(e) if e.is_plant_fault() => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        plant.state = state;
        if let Some(p) = prior {
            rows.push([input.q_h2, input.q_air, input.current]);
            tv.push((p.v_fc, m.v_fc));
            tp.push((p.p_h2, m.p_h2));
        }
        prior = Some(m);
    }

    let build = |pairs: &[(f64, f64)], which| {
        let n = pairs.len();
        let x = DMatrix::from_fn(n, 4, |i, j| if j < 3 { rows[i][j] } else { pairs[i].0 });
        let y = DVector::from_fn(n, |i, _| pairs[i].1);
        RegressionSet::new(x, y, which)
    };
    Ok(Collected {
        voltage: build(&tv, Target::Voltage)?,
        pressure: build(&tp, Target::Pressure)?,
        skipped,
    })
}

/// Generate both regression sets from an LHS design.
pub fn generate(plant: &Plant, spec: &SamplingSpec, noise: &NoiseStd) -> Result<Collected> {
    let seq = lhs_sample(spec)?;
    // The noise stream is decorrelated from the design stream.
    collect(plant, &seq, spec.dt, noise, spec.seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Settings for the multi-restart hyperparameter search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
    /// Initial length scales are drawn log-uniformly from this range, in
    /// units of the input column's standard deviation.
    pub init_length_range: (f64, f64),
    /// Log-uniform range for the initial signal stds (standardized targets).
    pub init_signal_range: (f64, f64),
    /// Initial noise std on standardized targets.
    pub init_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            restarts: 2,
            max_iter: 200,
            grad_tol: 1e-5,
            seed: 7,
            init_length_range: (0.1, 10.0),
            init_signal_range: (0.5, 2.0),
            init_noise: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        if self.max_iter == 0 || !(self.grad_tol > 0.0) {
            return Err(Error::Config("max_iter must be >= 1 and grad_tol > 0".into()));
        }
        for (name, (lo, hi)) in [
            ("init_length_range", self.init_length_range),
            ("init_signal_range", self.init_signal_range),
        ] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Config(format!("{name} must satisfy 0 < low <= high")));
            }
        }
        if !(self.init_noise > 0.0 && self.init_noise.is_finite()) {
            return Err(Error::Config("init_noise must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub init: KernelParams,
    pub init_lml: f64,
    pub params: KernelParams,
    pub lml: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: KernelParams,
    pub lml: f64,
    /// One entry per restart; `None` when the starting point could not be evaluated.
    pub restarts: Vec<Option<RestartOutcome>>,
}

/// Log-space box outside which the objective is treated as undefined.
const LOG_BOUND: f64 = 20.0;

fn column_std(x: &DMatrix<f64>, j: usize) -> f64 {
    let c = x.column(j);
    let n = c.len() as f64;
    let mean = c.sum() / n;
    let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 { var.sqrt() } else { 1.0 }
}

/// Random starting point: length scales log-uniform over a multiple of the
/// column spread, signal stds around the (standardized) target spread.
pub fn initial_guess<R: Rng + ?Sized>(data: &Dataset, cfg: &TrainConfig, rng: &mut R) -> KernelParams {
    let d = data.d();
    let stds: Vec<f64> = (0..d).map(|j| column_std(&data.x, j)).collect();
    let mean_std = stds.iter().sum::<f64>() / d as f64;
    let mut log_uniform = |lo: f64, hi: f64| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    let (l_lo, l_hi) = cfg.init_length_range;
    let (s_lo, s_hi) = cfg.init_signal_range;
    let l_iso = log_uniform(l_lo, l_hi) * mean_std;
    let l_ard = stds.iter().map(|s| log_uniform(l_lo, l_hi) * s).collect();
    let sigma_iso = log_uniform(s_lo, s_hi);
    let sigma_ard = log_uniform(s_lo, s_hi);
    KernelParams {
        sigma_iso,
        l_iso,
        sigma_ard,
        l_ard,
        sigma_n: cfg.init_noise,
    }
}

/// LML and its gradient on standardized targets; `None` where undefined.
pub fn lml_objective(data: &Dataset, st: Standardization, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
    if theta.iter().any(|t| !t.is_finite() || t.abs() > LOG_BOUND) {
        return None;
    }
    let params = KernelParams::from_log_vec(theta);
    let model = GpModel::fit_jittered(data.clone(), params, st).ok()?;
    let lml = model.log_marginal_likelihood();
    lml.is_finite().then(|| (lml, model.lml_gradient()))
}

/// Maximize the LML from `cfg.restarts` random starts and keep the best.
pub fn optimize_hyperparams(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let st = Standardization::from_targets(&data.y);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inits: Vec<KernelParams> = (0..cfg.restarts).map(|_| initial_guess(data, cfg, &mut rng)).collect();
    let lcfg = LbfgsConfig {
        max_iter: cfg.max_iter,
        grad_tol: cfg.grad_tol,
        ..LbfgsConfig::default()
    };

    let outcomes: Vec<Option<RestartOutcome>> = inits
        .par_iter()
        .map(|init| {
            let theta0 = init.to_log_vec();
            let init_lml = lml_objective(data, st, &theta0)?.0;
            let neg = |t: &[f64]| lml_objective(data, st, t).map(|(f, g)| (-f, g.into_iter().map(|v| -v).collect()));
            let r = lbfgs::minimize(neg, &theta0, &lcfg)?;
            Some(RestartOutcome {
                init: init.clone(),
                init_lml,
                params: KernelParams::from_log_vec(&r.x),
                lml: -r.f,
                iterations: r.iterations,
                converged: r.converged,
            })
        })
        .collect();

    // Highest LML wins; earlier restarts win ties.
    let best = outcomes
        .iter()
        .flatten()
        .fold(None::<&RestartOutcome>, |acc, o| match acc {
            Some(b) if b.lml >= o.lml => Some(b),
            _ => Some(o),
        });
    match best {
        Some(b) => Ok(TrainOutcome {
            params: b.params.clone(),
            lml: b.lml,
            restarts: outcomes.clone(),
        }),
        None => Err(Error::Optimization {
            reason: format!("all {} restarts failed to evaluate", cfg.restarts),
            best: None,
        }),
    }
}

/// Optimize hyperparameters and fit the final standardized model.
pub fn train(set: &RegressionSet, cfg: &TrainConfig) -> Result<(GpModel, TrainOutcome)> {
    let data = set.to_dataset()?;
    let outcome = optimize_hyperparams(&data, cfg)?;
    let model = GpModel::fit_standardized(data, outcome.params.clone()).map_err(|e| Error::Optimization {
        reason: format!("final fit failed: {e}"),
        best: Some(Box::new(outcome.params.clone())),
    })?;
    Ok((model, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrediction {
    pub truth: f64,
    pub mean: f64,
    /// Predictive std of a measurement: latent variance plus the noise term.
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationReport {
    pub rmse: f64,
    pub coverage_1s: f64,
    pub coverage_2s: f64,
    pub n_test: usize,
}

/// One-step-ahead predictions for every row of `set`.
pub fn predict_set(model: &GpModel, set: &RegressionSet) -> Result<Vec<PointPrediction>> {
    let st = model.standardization();
    let noise_var = (model.params().sigma_n * st.scale).powi(2);
    (0..set.n())
        .map(|i| {
            let p = model.predict(&set.row(i))?;
            Ok(PointPrediction {
                truth: set.targets[i],
                mean: p.mean,
                std: (p.variance + noise_var).sqrt(),
            })
        })
        .collect()
}

/// RMSE and band coverage. A point whose error is at rounding level counts as
/// covered even when its band has zero width.
pub fn report_from_points(points: &[PointPrediction]) -> Result<ValidationReport> {
    if points.is_empty() {
        return Err(Error::Input("validation needs at least one test point".into()));
    }
    let n = points.len() as f64;
    let mut sq = 0.0;
    let (mut c1, mut c2) = (0usize, 0usize);
    for p in points {
        let e = (p.truth - p.mean).abs();
        sq += e * e;
        let slack = 1e-9 * p.truth.abs().max(1.0);
        c1 += usize::from(e <= p.std + slack);
        c2 += usize::from(e <= 2.0 * p.std + slack);
    }
    Ok(ValidationReport {
        rmse: (sq / n).sqrt(),
        coverage_1s: c1 as f64 / n,
        coverage_2s: c2 as f64 / n,
        n_test: points.len(),
    })
}

pub fn validate(model: &GpModel, test: &RegressionSet) -> Result<ValidationReport> {
    report_from_points(&predict_set(model, test)?)
}

pub fn write_predictions_csv(points: &[PointPrediction], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["truth", "mean", "std"])?;
    for p in points {
        w.write_record([p.truth, p.mean, p.std].iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{PlantParams, NOMINAL_INPUT};

    #[test]
    fn lhs_two_samples_split_halves() {
        let spec = SamplingSpec {
            q_h2_range: (0.0, 1.0),
            q_air_range: (0.0, 1.0),
            current_range: (0.0, 1.0),
            n_samples: 2,
            ..SamplingSpec::default()
        };
        let s = lhs_sample(&spec).unwrap();
        for j in 0..3 {
            let mut c: Vec<f64> = s.column(j).iter().copied().collect();
            c.sort_by(f64::total_cmp);
            assert!(c[0] >= 0.0 && c[0] < 0.5 && c[1] >= 0.5 && c[1] < 1.0);
        }
    }

    #[test]
    fn lhs_occupancy() {
        let spec = SamplingSpec {
            n_samples: 50,
            ..SamplingSpec::default()
        };
        let s = lhs_sample(&spec).unwrap();
        for (j, (lo, hi)) in spec.ranges().into_iter().enumerate() {
            let mut hist = [0usize; 50];
            for i in 0..50 {
                let k = ((s[(i, j)] - lo) / (hi - lo) * 50.0).floor() as usize;
                hist[k] += 1;
            }
            assert_eq!(hist, [1usize; 50]);
        }
    }

    #[test]
    fn constant_input_gives_fixed_point_pairs() {
        let plant = Plant::at_steady_state(PlantParams::default(), &NOMINAL_INPUT).unwrap();
        let seq = DMatrix::from_fn(6, 3, |_, j| [250.0, 500.0, 110.0][j]);
        let c = collect(&plant, &seq, 0.5, &NoiseStd::ZERO, 3).unwrap();
        assert_eq!(c.voltage.n(), 5);
        assert_eq!(c.skipped, 0);
        for i in 0..5 {
            assert!((c.voltage.targets[i] - c.voltage.inputs[(i, 3)]).abs() < 1e-9);
            assert!((c.pressure.targets[i] - c.pressure.inputs[(i, 3)]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_prediction_rmse() {
        let pts: Vec<PointPrediction> = [1.0, -1.0, 1.0, -1.0]
            .iter()
            .map(|&t| PointPrediction { truth: t, mean: 0.0, std: 0.5 })
            .collect();
        let r = report_from_points(&pts).unwrap();
        assert!((r.rmse - 1.0).abs() < 1e-15);
        assert_eq!(r.coverage_1s, 0.0);
        assert_eq!(r.coverage_2s, 1.0);
    }
}
