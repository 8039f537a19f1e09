//! The `imexode` command line.
//!
//! Settings are resolved in three layers: the experiment preset, then the
//! `key = value` file given by `--config`, then command-line flags. The fully
//! resolved configuration is echoed as `# key = value` lines at the top of every
//! CSV the run writes.
//!
//! Exit codes: 0 success, 1 a check did not pass, 2 bad configuration or
//! arguments, 3 linear or nonlinear solver divergence, 4 state blow-up, 5 I/O.

use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::gradient_check;
use crate::datagen::{
    generate_burgers, generate_ks, ks_initial_condition, BurgersConfig, Dataset, KsConfig,
};
use crate::error::{Error, FailureClass, Result};
use crate::integrator::{convergence_study, NewtonConfig, NfeCounter, StepContext, Stepper};
use crate::linalg::{DenseMatrix, SolverConfig, SolverKind};
use crate::netcore::{init_weights, make_burgers_diffusion, make_ks_stencil, MlpModel, PartitionedOde};
use crate::tableaux::{get_tableau, verify_order_conditions, ButcherTableauPair, SchemeId};
use crate::training::{rollout, train, write_metrics_csv, AdamConfig, MetricsRow, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_BLOWUP: i32 = 4;
pub const EXIT_IO: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        FailureClass::Config => EXIT_CONFIG,
        FailureClass::SolverDivergence => EXIT_SOLVER,
        FailureClass::BlowUp => EXIT_BLOWUP,
        FailureClass::Io => EXIT_IO,
    }
}

/// The physical system behind an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum System {
    KuramotoSivashinsky,
    Burgers,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::KuramotoSivashinsky => "ks",
            System::Burgers => "burgers",
        }
    }

    /// Domain length used when generating data.
    pub fn length(self) -> f64 {
        match self {
            System::KuramotoSivashinsky => 22.0,
            System::Burgers => 1.0,
        }
    }

    /// Viscosity of the Burgers diffusion.
    pub const BURGERS_NU: f64 = 8e-4;

    /// The fixed linear part on a grid of `d` points over `length`.
    pub fn linear_operator(self, d: usize, length: f64) -> Result<crate::netcore::StencilOperator> {
        match self {
            System::KuramotoSivashinsky => make_ks_stencil(d, length),
            System::Burgers => make_burgers_diffusion(d, length, Self::BURGERS_NU),
        }
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ks" | "kuramoto-sivashinsky" => Ok(System::KuramotoSivashinsky),
            "burgers" => Ok(System::Burgers),
            other => Err(Error::InvalidArgument(format!("unknown system `{other}` (expected ks or burgers)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Ks64,
    Ks512,
    Burgers512,
    Burgers1024,
    Custom,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Ks64 => "ks64",
            Experiment::Ks512 => "ks512",
            Experiment::Burgers512 => "burgers512",
            Experiment::Burgers1024 => "burgers1024",
            Experiment::Custom => "custom",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ks64" => Ok(Experiment::Ks64),
            "ks512" => Ok(Experiment::Ks512),
            "burgers512" => Ok(Experiment::Burgers512),
            "burgers1024" => Ok(Experiment::Burgers1024),
            "custom" => Ok(Experiment::Custom),
            other => Err(Error::InvalidArgument(format!(
                "unknown experiment `{other}` (expected ks64, ks512, burgers512, burgers1024 or custom)"
            ))),
        }
    }
}

/// Fully resolved run settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub system: System,
    pub grid: usize,
    pub scheme: SchemeId,
    pub dt: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub solver: SolverConfig,
    pub newton: NewtonConfig,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    pub init_sigma: f64,
    /// Trajectories to generate (Burgers) and how many of them are for training.
    pub n_traj: usize,
    pub n_train: usize,
    /// Recorded time span of generated data.
    pub span: f64,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub wall_time: bool,
    /// See [`TrainConfig::max_growth`].
    pub max_growth: f64,
}

/// Keys accepted in a config file, in the order they are echoed.
pub const CONFIG_KEYS: &[&str] = &[
    "experiment",
    "system",
    "grid",
    "scheme",
    "dt",
    "epochs",
    "batch_size",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
    "solver.kind",
    "solver.tol",
    "solver.maxit",
    "solver.restart",
    "newton.tol",
    "newton.max_iter",
    "hidden",
    "init_sigma",
    "n_traj",
    "n_train",
    "span",
    "data",
    "model",
    "metrics",
    "wall_time",
    "max_growth",
];

impl RunConfig {
    pub fn preset(experiment: Experiment) -> Self {
        let (system, grid, width, n_traj, n_train) = match experiment {
            Experiment::Ks64 => (System::KuramotoSivashinsky, 64, 200, 1, 1),
            Experiment::Ks512 => (System::KuramotoSivashinsky, 512, 1600, 1, 1),
            Experiment::Burgers512 => (System::Burgers, 512, 576, 100, 80),
            Experiment::Burgers1024 => (System::Burgers, 1024, 1152, 100, 80),
            Experiment::Custom => (System::Burgers, 64, 64, 10, 8),
        };
        let depth = if experiment == Experiment::Custom { 2 } else { 4 };
        let ks = system == System::KuramotoSivashinsky;
        Self {
            experiment,
            system,
            grid,
            scheme: SchemeId::ImexRk3,
            dt: if ks { 0.2 } else { 0.05 },
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            solver: SolverConfig::default(),
            newton: NewtonConfig::default(),
            hidden: vec![width; depth],
            init_sigma: if ks { 0.01 } else { 0.1 },
            n_traj,
            n_train,
            span: if ks { 200.0 } else { 5.0 },
            data: None,
            model: None,
            metrics: None,
            wall_time: true,
            max_growth: 10.0,
        }
    }

    /// Parses `key = value` lines on top of a preset. `experiment` picks the
    /// preset and is applied before every other key, wherever it appears.
    pub fn parse(text: &str, experiment_override: Option<Experiment>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let experiment = match (experiment_override, pairs.iter().rev().find(|(k, _)| k == "experiment")) {
            (Some(e), _) => e,
            (None, Some((_, v))) => v.parse()?,
            (None, None) => Experiment::Ks64,
        };
        let mut cfg = Self::preset(experiment);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "experiment") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, experiment_override: Option<Experiment>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, experiment_override)
    }

    /// Sets one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("config key `{key}`: cannot parse `{v}`")))
        }
        match key {
            "experiment" => self.experiment = value.parse()?,
            "system" => self.system = value.parse()?,
            "grid" => self.grid = num(key, value)?,
            "scheme" => self.scheme = value.parse()?,
            "dt" => self.dt = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.adam.lr = num(key, value)?,
            "adam_beta1" => self.adam.beta1 = num(key, value)?,
            "adam_beta2" => self.adam.beta2 = num(key, value)?,
            "adam_eps" => self.adam.eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "solver.kind" => {
                self.solver.kind = match value.to_ascii_lowercase().as_str() {
                    "direct" | "lu" => SolverKind::Direct,
                    "krylov" | "gmres" => SolverKind::Krylov,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "solver.kind must be direct or krylov, got `{other}`"
                        )))
                    }
                }
            }
            "solver.tol" => self.solver.krylov_tol = num(key, value)?,
            "solver.maxit" => self.solver.krylov_maxit = num(key, value)?,
            "solver.restart" => self.solver.restart = num(key, value)?,
            "newton.tol" => self.newton.tol = num(key, value)?,
            "newton.max_iter" => self.newton.max_iter = num(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "init_sigma" => self.init_sigma = num(key, value)?,
            "n_traj" => self.n_traj = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "span" => self.span = num(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            "metrics" => self.metrics = Some(PathBuf::from(value)),
            "wall_time" => self.wall_time = num(key, value)?,
            "max_growth" => self.max_growth = num(key, value)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key `{other}` (known keys: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, in [`CONFIG_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string());
        let kind = match self.solver.kind {
            SolverKind::Direct => "direct",
            SolverKind::Krylov => "krylov",
        };
        let hidden: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        let values = [
            self.experiment.to_string(),
            self.system.name().to_string(),
            self.grid.to_string(),
            self.scheme.to_string(),
            self.dt.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.adam.lr.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.seed.to_string(),
            kind.to_string(),
            self.solver.krylov_tol.to_string(),
            self.solver.krylov_maxit.to_string(),
            self.solver.restart.to_string(),
            self.newton.tol.to_string(),
            self.newton.max_iter.to_string(),
            hidden.join(","),
            self.init_sigma.to_string(),
            self.n_traj.to_string(),
            self.n_train.to_string(),
            self.span.to_string(),
            path(&self.data),
            path(&self.model),
            path(&self.metrics),
            self.wall_time.to_string(),
            self.max_growth.to_string(),
        ];
        CONFIG_KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// The config in the same `key = value` form it is read from.
    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Layer widths `[grid, hidden.., grid]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.grid];
        dims.extend(&self.hidden);
        dims.push(self.grid);
        dims
    }

    /// A freshly initialized model for this config on a grid over `length`.
    pub fn build_model(&self, length: f64) -> Result<PartitionedOde<MlpModel>> {
        let g = init_weights(&self.layer_dims(), self.init_sigma, self.seed)?;
        PartitionedOde::new(g, self.system.linear_operator(self.grid, length)?)
    }

    /// Generates the dataset this config describes.
    pub fn generate_data(&self) -> Result<Dataset> {
        match self.system {
            System::KuramotoSivashinsky => {
                let mut c = KsConfig::new(self.grid);
                c.t_span = self.span;
                generate_ks(&c)
            }
            System::Burgers => {
                let mut c = BurgersConfig::new(self.grid);
                c.n_traj = self.n_traj;
                c.n_train = self.n_train;
                c.t_final = self.span;
                generate_burgers(&c, self.seed)
            }
        }
    }

    /// Training settings for a dataset sampled every `dt_sample`.
    pub fn train_config(&self, dt_sample: f64) -> Result<TrainConfig> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        let steps = (dt_sample / self.dt).round().max(1.0) as usize;
        Ok(TrainConfig {
            scheme: self.scheme,
            dt: self.dt,
            steps_per_sample: steps,
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam: self.adam,
            seed: self.seed,
            solver: self.solver,
            newton: self.newton,
            record_wall_time: self.wall_time,
            max_growth: self.max_growth,
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "imexode", version, about = "Semi-implicit neural ODE training and analysis")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Main output file of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings most commands accept on top of the config file.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Experiment preset: ks64, ks512, burgers512, burgers1024 or custom.
    #[arg(long)]
    pub experiment: Option<Experiment>,
    #[arg(long)]
    pub scheme: Option<SchemeId>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Any config key, as `key=value`. May be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a trajectory dataset.
    GenData {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model on a dataset and write the model and per-epoch metrics.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Dataset file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Metrics CSV path (defaults to the model path with a `.csv` extension).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Roll a trained model out along one dataset trajectory.
    Predict {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trajectory index (defaults to the first test trajectory).
        #[arg(long)]
        traj: Option<usize>,
    },
    /// Compare adjoint gradients with finite differences on a small model.
    GradCheck {
        #[command(flatten)]
        overrides: Overrides,
        /// Grid size of the toy problem.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        /// Number of sampled parameters.
        #[arg(long, default_value_t = 30)]
        components: usize,
        /// Relative finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        /// Pass threshold on the maximum relative error.
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
    },
    /// Self-convergence orders on a stiff split test problem.
    Convergence {
        /// Schemes to test; `euler` adds the explicit Euler control.
        #[arg(long, value_delimiter = ',', default_value = "imex-rk2,imex-rk3,imex-rk4,imex-rk5")]
        schemes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.025,0.0125")]
        dts: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        t_final: f64,
    },
    /// Count function evaluations, reverse products and solves per training epoch.
    BenchNfe {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_value = "imex-rk2,imex-rk3,imex-rk4,imex-rk5")]
        schemes: Vec<SchemeId>,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        /// Dataset file; generated in memory from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print Butcher tableaux and their order-condition residuals.
    Tabulate {
        /// A single scheme; all schemes when absent.
        #[arg(long)]
        scheme: Option<SchemeId>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(cli: &Cli, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, o.experiment)?,
        None => RunConfig::preset(o.experiment.unwrap_or(Experiment::Ks64)),
    };
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = o.scheme {
        cfg.scheme = s;
    }
    if let Some(dt) = o.dt {
        cfg.dt = dt;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let quiet = cli.quiet;
    match &cli.command {
        Command::GenData { overrides } => {
            let cfg = resolve(cli, overrides)?;
            let path = cli
                .out
                .clone()
                .or_else(|| cfg.data.clone())
                .unwrap_or_else(|| PathBuf::from(format!("{}.ds", cfg.experiment)));
            let data = cfg.generate_data()?;
            data.save(&path)?;
            let h = data.header();
            if !quiet {
                writeln!(
                    out,
                    "wrote {}: d={} n_traj={} n_times={} n_train={} bytes={}",
                    path.display(),
                    h.d,
                    h.n_traj,
                    h.n_times,
                    h.n_train,
                    h.file_len()
                )?;
            }
            Ok(EXIT_OK)
        }
        Command::Train {
            overrides,
            data,
            epochs,
            metrics,
        } => {
            let mut cfg = resolve(cli, overrides)?;
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            if let Some(m) = &cli.out {
                cfg.model = Some(m.clone());
            }
            if let Some(m) = metrics {
                cfg.metrics = Some(m.clone());
            }
            cmd_train(&mut cfg, quiet, out)
        }
        Command::Predict {
            overrides,
            model,
            data,
            traj,
        } => {
            let mut cfg = resolve(cli, overrides)?;
            if let Some(m) = model {
                cfg.model = Some(m.clone());
            }
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("prediction.csv"));
            cmd_predict(&cfg, *traj, &path, quiet, out)
        }
        Command::GradCheck {
            overrides,
            dim,
            steps,
            components,
            h,
            threshold,
        } => {
            let cfg = resolve(cli, overrides)?;
            cmd_grad_check(&cfg, *dim, *steps, *components, *h, *threshold, cli.out.as_deref(), quiet, out)
        }
        Command::Convergence { schemes, dts, t_final } => {
            cmd_convergence(schemes, dts, *t_final, cli.out.as_deref(), quiet, out)
        }
        Command::BenchNfe {
            overrides,
            schemes,
            epochs,
            data,
        } => {
            let mut cfg = resolve(cli, overrides)?;
            cfg.epochs = *epochs;
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            cmd_bench_nfe(&cfg, schemes, cli.out.as_deref(), quiet, out)
        }
        Command::Tabulate { scheme } => cmd_tabulate(*scheme, cli.out.as_deref(), out),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("no {what} path given (use --{what} or the `{what}` config key)")))
}

fn cmd_train(cfg: &mut RunConfig, quiet: bool, out: &mut dyn Write) -> Result<i32> {
    let data = Dataset::load(require(&cfg.data, "data")?)?;
    cfg.grid = data.d();
    let model_path = cfg.model.clone().unwrap_or_else(|| PathBuf::from("model.imexnn"));
    let metrics_path = cfg.metrics.clone().unwrap_or_else(|| model_path.with_extension("csv"));
    cfg.model = Some(model_path.clone());
    cfg.metrics = Some(metrics_path.clone());
    let tc = cfg.train_config(data.dt_sample())?;
    let mut ode = cfg.build_model(data.length())?;
    if !quiet {
        writeln!(
            out,
            "training {} parameters with {} (dt={}, {} step(s) per sample) for {} epochs",
            ode.param_count(),
            tc.scheme,
            tc.dt,
            tc.steps_per_sample,
            tc.epochs
        )?;
        writeln!(out, "{}", crate::training::METRICS_HEADER)?;
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    let result = train(&mut ode, &data, &tc, |r| {
        if !quiet {
            let _ = writeln!(out, "{}", r.to_csv());
        }
        rows.push(r.clone());
    });
    // metrics are written even when the run fails, so failed runs can be tabulated
    write_metrics_csv(create(&metrics_path)?, &cfg.to_pairs(), &rows)?;
    let report = result?;
    ode.explicit().save(&model_path)?;
    if !quiet {
        writeln!(
            out,
            "initial train loss {:e}, final train loss {:e}; model {}, metrics {}",
            report.initial_train_loss,
            report.final_train_loss,
            model_path.display(),
            metrics_path.display()
        )?;
    }
    Ok(EXIT_OK)
}

fn cmd_predict(cfg: &RunConfig, traj: Option<usize>, path: &Path, quiet: bool, out: &mut dyn Write) -> Result<i32> {
    let model = MlpModel::load(require(&cfg.model, "model")?)?;
    let data = Dataset::load(require(&cfg.data, "data")?)?;
    let traj = traj.unwrap_or(if data.n_train() < data.n_traj() { data.n_train() } else { 0 });
    if traj >= data.n_traj() {
        return Err(Error::InvalidArgument(format!(
            "trajectory index {traj} out of range (dataset has {})",
            data.n_traj()
        )));
    }
    let ode = PartitionedOde::new(model, cfg.system.linear_operator(data.d(), data.length())?)?;
    let tc = cfg.train_config(data.dt_sample())?;
    let stepper = Stepper::for_scheme(cfg.scheme)?;
    let u0 = DenseMatrix::new(data.d(), 1, data.snapshot(traj, 0).to_vec())?;
    let mut ctx = StepContext {
        solver: cfg.solver,
        newton: cfg.newton,
        ..StepContext::default()
    };
    let states = rollout(&ode, &stepper, &u0, tc.dt, tc.steps_per_sample, data.n_times() - 1, &mut ctx)?;

    let mut w = create(path)?;
    for (k, v) in cfg.to_pairs() {
        writeln!(w, "# {k} = {v}")?;
    }
    writeln!(w, "# trajectory = {traj}")?;
    let cols: Vec<String> = (0..data.d()).map(|i| format!("u{i}")).collect();
    writeln!(w, "t,rel_l2_error,{}", cols.join(","))?;
    if !quiet {
        writeln!(out, "t,rel_l2_error")?;
    }
    for (n, u) in states.iter().enumerate() {
        let truth = data.snapshot(traj, n);
        let (mut num, mut den) = (0.0, 0.0);
        for (p, t) in u.data().iter().zip(truth) {
            num += (p - t) * (p - t);
            den += t * t;
        }
        let err = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        let t = (n as f64 * data.dt_sample() * 1e9).round() / 1e9;
        let vals: Vec<String> = u.data().iter().map(|x| format!("{x:e}")).collect();
        writeln!(w, "{t},{err:e},{}", vals.join(","))?;
        if !quiet {
            writeln!(out, "{t},{err:e}")?;
        }
    }
    w.flush()?;
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_grad_check(
    cfg: &RunConfig,
    dim: usize,
    steps: usize,
    n_components: usize,
    h: f64,
    threshold: f64,
    path: Option<&Path>,
    quiet: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let length = cfg.system.length();
    let mut toy = cfg.clone();
    toy.grid = dim;
    if cfg.experiment != Experiment::Custom && cfg.hidden.iter().all(|&w| w > 4 * dim) {
        // presets describe full-size networks; the check runs at reduced width
        toy.hidden = vec![2 * dim; 2];
    }
    if toy.init_sigma < 0.1 {
        toy.init_sigma = 0.1;
    }
    let mut ode = toy.build_model(length)?;
    let u0 = match cfg.system {
        System::KuramotoSivashinsky => DenseMatrix::new(dim, 1, ks_initial_condition(dim, length))?,
        System::Burgers => DenseMatrix::from_fn(dim, 1, |i, _| {
            (2.0 * std::f64::consts::PI * i as f64 / dim as f64).sin()
        }),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let components: Vec<usize> = (0..n_components).map(|_| rng.random_range(0..ode.param_count())).collect();
    let mut settings = StepContext {
        solver: cfg.solver,
        newton: cfg.newton,
        ..StepContext::default()
    };
    settings.newton.tol = settings.newton.tol.min(1e-14);
    settings.solver.krylov_tol = settings.solver.krylov_tol.min(1e-12);
    let stepper = Stepper::for_scheme(cfg.scheme)?;
    let report = gradient_check(&mut ode, &stepper, &u0, cfg.dt, steps, &components, h, &settings)?;
    let worst = report.max_rel_error();

    if let Some(p) = path {
        let mut w = create(p)?;
        for (k, v) in toy.to_pairs() {
            writeln!(w, "# {k} = {v}")?;
        }
        writeln!(w, "param,adjoint,finite_difference,rel_error")?;
        for (k, a, f, r) in &report.components {
            writeln!(w, "{k},{a:e},{f:e},{r:e}")?;
        }
        w.flush()?;
    }
    let pass = worst < threshold;
    if !quiet {
        writeln!(
            out,
            "{} d={} layers={:?} dt={} steps={}: max relative error {:.3e} over {} components ({})",
            cfg.scheme,
            dim,
            toy.layer_dims(),
            cfg.dt,
            steps,
            worst,
            report.components.len(),
            if pass { "pass" } else { "FAIL" }
        )?;
    }
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Least-squares slope of `log(error)` against `log(dt)`.
pub fn fitted_order(points: &[crate::integrator::ConvergencePoint]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.error > 0.0)
        .map(|p| (p.dt.ln(), p.error.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn stepper_by_name(name: &str) -> Result<(String, Stepper)> {
    match name.trim().to_ascii_lowercase().as_str() {
        "euler" | "forward-euler" => Ok(("euler".into(), Stepper::Explicit(ButcherTableauPair::forward_euler()))),
        other => {
            let id: SchemeId = other.parse()?;
            Ok((id.to_string(), Stepper::for_scheme(id)?))
        }
    }
}

fn cmd_convergence(
    schemes: &[String],
    dts: &[f64],
    t_final: f64,
    path: Option<&Path>,
    quiet: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let mut csv = String::from("scheme,dt,error,observed_order\n");
    for name in schemes {
        let (label, stepper) = stepper_by_name(name)?;
        let points = convergence_study(&stepper, dts, t_final)?;
        for p in &points {
            let order = p.observed_order.map_or_else(|| "-".to_string(), |o| format!("{o:.4}"));
            csv.push_str(&format!("{label},{},{:e},{order}\n", p.dt, p.error));
        }
        if !quiet {
            let slope = fitted_order(&points).map_or_else(|| "-".to_string(), |s| format!("{s:.3}"));
            writeln!(out, "{label:<16} fitted order {slope}")?;
        }
    }
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(csv.as_bytes())?;
            w.flush()?;
        }
        None if !quiet => out.write_all(csv.as_bytes())?,
        None => {}
    }
    Ok(EXIT_OK)
}

/// Per-scheme result of a counting run.
#[derive(Clone, Debug, PartialEq)]
pub struct NfeRow {
    pub scheme: SchemeId,
    pub epochs: usize,
    /// Totals over the run; per-epoch values divide by `epochs`.
    pub nfe: NfeCounter,
    /// `None` on success, otherwise the failure and its exit code.
    pub failure: Option<(String, i32)>,
}

impl NfeRow {
    fn per_epoch(&self, x: u64) -> u64 {
        if self.epochs == 0 {
            0
        } else {
            x / self.epochs as u64
        }
    }

    /// Forward evaluations per epoch (the forward pass only).
    pub fn forward(&self) -> u64 {
        self.per_epoch(self.nfe.forward_g_evals)
    }

    /// Reverse products of `G` per epoch.
    pub fn backward(&self) -> u64 {
        self.per_epoch(self.nfe.backward_vjp_evals)
    }

    /// Forward evaluations per epoch including the ones repeated inside the
    /// reverse sweep, which is how "forward + backward" totals are usually quoted.
    pub fn forward_with_recompute(&self) -> u64 {
        self.per_epoch(self.nfe.total_forward_evals())
    }
}

/// Trains a fresh model per scheme for `cfg.epochs` epochs and collects counters.
pub fn bench_nfe(cfg: &RunConfig, data: &Dataset, schemes: &[SchemeId]) -> Result<Vec<NfeRow>> {
    let mut rows = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let mut c = cfg.clone();
        c.scheme = scheme;
        c.grid = data.d();
        let tc = c.train_config(data.dt_sample())?;
        if tc.epochs == 0 {
            rows.push(NfeRow {
                scheme,
                epochs: 0,
                nfe: NfeCounter::default(),
                failure: None,
            });
            continue;
        }
        let mut ode = c.build_model(data.length())?;
        let mut last = NfeCounter::default();
        let mut epochs_done = 0;
        let result = train(&mut ode, data, &tc, |r| {
            epochs_done = r.epoch;
            last.forward_g_evals += r.nfe_fwd;
            last.backward_vjp_evals += r.nfe_bwd;
        });
        let row = match result {
            Ok(rep) => NfeRow {
                scheme,
                epochs: tc.epochs,
                nfe: rep.nfe,
                failure: None,
            },
            Err(e) => NfeRow {
                scheme,
                epochs: epochs_done,
                nfe: last,
                failure: Some((e.to_string(), exit_code(&e))),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

fn cmd_bench_nfe(
    cfg: &RunConfig,
    schemes: &[SchemeId],
    path: Option<&Path>,
    quiet: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let data = match &cfg.data {
        Some(p) => Dataset::load(p)?,
        None => cfg.generate_data()?,
    };
    let rows = bench_nfe(cfg, &data, schemes)?;
    let mut csv = String::new();
    for (k, v) in cfg.to_pairs() {
        csv.push_str(&format!("# {k} = {v}\n"));
    }
    csv.push_str("scheme,stages,fwd_nfe,bwd_nfe,fwd_plus_bwd,lu_factorizations,krylov_iters,status\n");
    if !quiet {
        writeln!(
            out,
            "{:<16}{:>7}{:>10}{:>10}{:>16}{:>6}{:>10}  status",
            "scheme", "stages", "fwd", "bwd", "fwd+bwd", "lu", "krylov"
        )?;
    }
    for r in &rows {
        let stages = get_tableau(r.scheme).map(|t| t.stages().to_string()).unwrap_or_else(|_| "-".into());
        let status = match &r.failure {
            None => "ok".to_string(),
            Some((_, code)) if *code == EXIT_BLOWUP => "blow-up".to_string(),
            Some((_, code)) if *code == EXIT_SOLVER => "solver-divergence".to_string(),
            Some((msg, _)) => format!("failed: {msg}"),
        };
        let combined = format!("{}+{}", r.forward_with_recompute(), r.backward());
        let krylov = r.per_epoch(r.nfe.krylov_iters);
        csv.push_str(&format!(
            "{},{stages},{},{},{combined},{},{krylov},{status}\n",
            r.scheme,
            r.forward(),
            r.backward(),
            r.nfe.lu_factorizations
        ));
        if !quiet {
            writeln!(
                out,
                "{:<16}{:>7}{:>10}{:>10}{:>16}{:>6}{:>10}  {status}",
                r.scheme.to_string(),
                stages,
                r.forward(),
                r.backward(),
                combined,
                r.nfe.lu_factorizations,
                krylov
            )?;
        }
    }
    if let Some(p) = path {
        let mut w = create(p)?;
        w.write_all(csv.as_bytes())?;
        w.flush()?;
    } else if !quiet {
        writeln!(out)?;
        out.write_all(csv.as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn cmd_tabulate(scheme: Option<SchemeId>, path: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let ids: Vec<SchemeId> = match scheme {
        Some(s) => vec![s],
        None => SchemeId::ALL.to_vec(),
    };
    let mut text = String::new();
    let mut all_pass = true;
    for id in ids {
        text.push_str(&format!("== {id} ==\n"));
        match get_tableau(id) {
            Ok(tab) => {
                tab.check_structure(1e-12)?;
                let report = verify_order_conditions(&tab, tab.order().min(3))?;
                all_pass &= report.passed();
                text.push_str(&tab.to_text());
                text.push_str(&report.to_text());
            }
            Err(Error::NoTableau(_)) => text.push_str("no Butcher tableau (implicit trapezoidal rule with Newton solves)\n"),
            Err(e) => return Err(e),
        }
        text.push('\n');
    }
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}
