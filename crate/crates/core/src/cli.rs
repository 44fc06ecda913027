//! Command-line front end: generate-data, train, validate, simulate, compare.
//!
//! All file I/O of the toolkit happens here. Each command loads and validates
//! the config before it creates or writes anything.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::gp::{GpModel, KernelParams};
use crate::plant::{Plant, NOMINAL_INPUT};
use crate::sim::{self, ControllerKind, GpPair, SimTrace};
use crate::training::{self, RegressionSet, Target, TrainOutcome};

#[derive(Debug, Parser)]
#[command(name = "gpmpc", version, about = "GP-based MPC for a PEM fuel cell stack")]
pub struct Cli {
    /// Config file (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Replace every seed in the config with ones derived from N.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory, overrides `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Excite the simulated stack and write train/test regression CSVs.
    GenerateData {
        /// Number of training input samples (one fewer regression row).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Fit both GP models by maximizing the log marginal likelihood.
    Train,
    /// Score the trained models on the test set.
    Validate,
    /// Run one closed-loop scenario.
    Simulate {
        #[arg(long, value_enum, default_value = "gp")]
        controller: ControllerArg,
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
    },
    /// Ratio table of GP-MPC against MPC on one scenario.
    Compare {
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    Gp,
    Physical,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Gp => ControllerKind::Gp,
            ControllerArg::Physical => ControllerKind::Physical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Step,
    Ramp,
}

impl ScenarioArg {
    fn as_str(self) -> &'static str {
        match self {
            ScenarioArg::Step => "step",
            ScenarioArg::Ramp => "ramp",
        }
    }
}

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Layout { dir: dir.into() }
    }

    pub fn data(&self, split: &str, which: Target) -> PathBuf {
        self.dir.join(format!("{split}_{}.csv", which.as_str()))
    }

    pub fn model(&self, which: Target) -> PathBuf {
        self.dir.join(format!("model_{}.gp", which.as_str()))
    }

    pub fn predictions(&self, which: Target) -> PathBuf {
        self.dir.join(format!("predictions_{}.csv", which.as_str()))
    }

    pub fn run_stem(&self, scenario: &str, controller: ControllerKind) -> String {
        format!("{scenario}_{}", controller.as_str())
    }

    pub fn trace(&self, scenario: &str, controller: ControllerKind) -> PathBuf {
        self.dir.join(format!("trace_{}.csv", self.run_stem(scenario, controller)))
    }
}

fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e)
}

/// Execute a parsed command line, writing human-readable output to `out`.
pub fn run<W: Write>(cli: &Cli, out: &mut W) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenerateData { samples } => {
            if let Some(n) = samples {
                cfg.sampling.n_samples = *n;
            }
            cfg.validate()?;
            generate_data(&cfg, out)
        }
        Command::Train => {
            cfg.validate()?;
            train(&cfg, out)
        }
        Command::Validate => {
            cfg.validate()?;
            validate(&cfg, out)
        }
        Command::Simulate { controller, scenario } => {
            if let Some(s) = scenario {
                cfg.scenario.name = s.as_str().into();
            }
            cfg.validate()?;
            simulate(&cfg, (*controller).into(), out)
        }
        Command::Compare { scenario } => {
            if let Some(s) = scenario {
                cfg.scenario.name = s.as_str().into();
            }
            cfg.validate()?;
            compare(&cfg, out)
        }
    }
}

pub fn generate_data<W: Write>(cfg: &Config, out: &mut W) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let plant = Plant::at_steady_state(cfg.plant_params(), &NOMINAL_INPUT)?;
    let train = training::generate(&plant, &cfg.train_spec(), &cfg.noise)?;
    let test = training::generate(&plant, &cfg.test_spec(), &cfg.noise)?;
    create_dir(&layout.dir)?;
    for (split, c) in [("train", &train), ("test", &test)] {
        c.voltage.write_csv(&layout.data(split, Target::Voltage))?;
        c.pressure.write_csv(&layout.data(split, Target::Pressure))?;
        writeln!(out, "{split}: {} rows per target ({} samples skipped)", c.voltage.n(), c.skipped).map_err(io_err)?;
    }
    Ok(())
}

fn format_params(p: &KernelParams) -> String {
    let ard: Vec<String> = p.l_ard.iter().map(|l| format!("{l:.6e}")).collect();
    format!(
        "sigma_iso={:.6e} l_iso={:.6e} sigma_ard={:.6e} l_ard=[{}] sigma_n={:.6e}",
        p.sigma_iso,
        p.l_iso,
        p.sigma_ard,
        ard.join(", "),
        p.sigma_n
    )
}

fn restart_summary(o: &TrainOutcome) -> String {
    let ok = o.restarts.iter().flatten().count();
    let lmls: Vec<String> = o
        .restarts
        .iter()
        .map(|r| r.as_ref().map_or_else(|| "failed".into(), |r| format!("{:.4}", r.lml)))
        .collect();
    format!("restarts {ok}/{} ok, lml per restart [{}]", o.restarts.len(), lmls.join(", "))
}

pub fn train<W: Write>(cfg: &Config, out: &mut W) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let sets = [Target::Voltage, Target::Pressure]
        .into_iter()
        .map(|w| RegressionSet::read_csv(&layout.data("train", w), w))
        .collect::<Result<Vec<_>>>()?;
    for set in &sets {
        let name = set.which.as_str();
        let (model, outcome) = match training::train(set, &cfg.training) {
            Ok(v) => v,
            Err(e) => {
                if let Error::Optimization { best: Some(p), .. } = &e {
                    writeln!(out, "{name}: failed, best so far {}", format_params(p)).map_err(io_err)?;
                } else {
                    writeln!(out, "{name}: failed").map_err(io_err)?;
                }
                return Err(e);
            }
        };
        write_file(&layout.model(set.which), &model.to_text())?;
        writeln!(out, "{name}: lml={:.6} n={}", model.log_marginal_likelihood(), set.n()).map_err(io_err)?;
        writeln!(out, "  {}", format_params(model.params())).map_err(io_err)?;
        writeln!(out, "  {}", restart_summary(&outcome)).map_err(io_err)?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<GpModel> {
    GpModel::from_text(&read_file(path)?)
}

pub fn validate<W: Write>(cfg: &Config, out: &mut W) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    for which in [Target::Voltage, Target::Pressure] {
        let model = load_model(&layout.model(which))?;
        let test = RegressionSet::read_csv(&layout.data("test", which), which)?;
        let points = training::predict_set(&model, &test)?;
        let report = training::report_from_points(&points)?;
        training::write_predictions_csv(&points, &layout.predictions(which))?;
        writeln!(
            out,
            "{}: rmse={:.6} coverage_1sigma={:.4} coverage_2sigma={:.4} n_test={}",
            which.as_str(),
            report.rmse,
            report.coverage_1s,
            report.coverage_2s,
            report.n_test
        )
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn simulate<W: Write>(cfg: &Config, controller: ControllerKind, out: &mut W) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let scenario = cfg.scenario_named(&cfg.scenario.name)?;
    let models = match controller {
        ControllerKind::Gp => Some((
            load_model(&layout.model(Target::Voltage))?,
            load_model(&layout.model(Target::Pressure))?,
        )),
        ControllerKind::Physical => None,
    };
    let pair = models.as_ref().map(|(v, p)| GpPair {
        voltage: v,
        pressure: p,
    });
    let trace = sim::run(&scenario, controller, pair, &cfg.plant_params(), &cfg.mpc, &cfg.sim_config())?;

    create_dir(&layout.dir)?;
    let stem = layout.run_stem(&scenario.name, controller);
    trace.write_csv(&layout.trace(&scenario.name, controller))?;
    let mcfg = cfg.metrics_config();
    if !trace.rows.is_empty() {
        let metrics = sim::compute_metrics(&trace, &mcfg)?;
        let kv = metrics.to_key_value(&trace);
        write_file(&layout.dir.join(format!("metrics_{stem}.txt")), &kv)?;
        write_file(&layout.dir.join(format!("metrics_{stem}.json")), &metrics.to_json(&trace))?;
        sim::write_plots(&trace, &mcfg, &layout.dir, &format!("{stem}_"))?;
        write!(out, "{kv}").map_err(io_err)?;
    }
    match &trace.fault {
        Some(f) => Err(Error::PlantFault {
            time: trace.rows.last().map_or(0.0, |r| r.t),
            source: Box::new(Error::Domain(f.clone())),
        }),
        None => Ok(()),
    }
}

pub fn compare<W: Write>(cfg: &Config, out: &mut W) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let name = &cfg.scenario.name;
    let mpc = SimTrace::read_csv(&layout.trace(name, ControllerKind::Physical))?;
    let gp = SimTrace::read_csv(&layout.trace(name, ControllerKind::Gp))?;
    if mpc.controller != "physical" || gp.controller != "gp" {
        return Err(Error::Input("trace files carry the wrong controller labels".into()));
    }
    let cmp = sim::compare(&mpc, &gp, &cfg.metrics_config())?;
    let table = cmp.to_table();
    write_file(&layout.dir.join(format!("compare_{name}.txt")), &table)?;
    let json = serde_json::to_string_pretty(&cmp).expect("comparison serializes");
    write_file(&layout.dir.join(format!("compare_{name}.json")), &json)?;
    write!(out, "{table}").map_err(io_err)?;
    Ok(())
}
