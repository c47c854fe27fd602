use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dobcbf::dob::{certify_against, certify_bound, compute_error_bound, BoundMode, CertificationReport, CertifyOptions, ObserverConfig};
use dobcbf::dynamics::sample_lipschitz_disturbance;
use dobcbf::envs::{FilterMode, PlantKind};
use dobcbf::harness::{
    build_plant, default_checkpoints, estimation_error_sweep, prepare, run_experiment_with, timing_profile,
    ConfigLayer, DisturbanceSpec, ExperimentConfig, OutputLayer, ProfileOptions,
};
use dobcbf::hocbf::KappaKind;
use dobcbf::par::Execution;
use dobcbf::policy::PolicySpec;
use dobcbf::Error;

/// Exit codes, one per failure category.
mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const ABORTED: u8 = 3;
    pub const IO: u8 = 4;
    pub const CERTIFICATION: u8 = 5;
    pub const BRIDGE: u8 = 6;
    pub const NUMERIC: u8 = 7;
}

#[derive(Parser)]
#[command(name = "dobcbf", version, about = "DOB-CBF safety filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an episode batch and write per-episode CSV, summary JSON and transitions.
    Run(ConfigArgs),
    /// Estimation error at training-step checkpoints over 5 trials.
    SweepError {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training-step checkpoints; defaults to six points spread over the run.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<usize>,
    },
    /// Filter wall-clock per 1000 steps at training-step checkpoints.
    Profile {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<usize>,
        /// Episodes timed per checkpoint.
        #[arg(long, default_value_t = 3)]
        window: usize,
        /// Repeats per checkpoint; the fastest is kept.
        #[arg(long, default_value_t = 11)]
        repeats: usize,
    },
    /// Audit the observer error bound by simulation under random inputs.
    CertifyBound {
        #[command(flatten)]
        config: ConfigArgs,
        /// Additional randomly generated disturbances with the plant's declared constants.
        #[arg(long, default_value_t = 0)]
        random_disturbances: usize,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        /// Simulated seconds per trial.
        #[arg(long, default_value_t = 2.0)]
        horizon: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlantArg {
    Unicycle,
    Quadrotor,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    DobCbf,
    NominalCbf,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundArg {
    Theoretical,
    Empirical,
}

#[derive(Clone, Copy, ValueEnum)]
enum KappaArg {
    Linear,
    Cubic,
}

/// Every experiment field; flags override the config file.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    plant: Option<PlantArg>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps_per_episode: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Observer sampling period T (also the control period).
    #[arg(long, visible_alias = "period")]
    sample_period: Option<f64>,
    /// Predictor gain a.
    #[arg(long)]
    observer_gain: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    beta_gains: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    beta_kind: Option<KappaArg>,
    /// Policy as inline JSON, e.g. '{"kind":"constant","u":[0.5,0]}'.
    #[arg(long)]
    policy: Option<String>,
    /// Exploration noise amplitudes for the noisy explorer, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "policy")]
    noise: Option<Vec<f64>>,
    /// `default`, `none`, or a scale factor on the built-in profile.
    #[arg(long)]
    disturbance: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    filter: Option<FilterArg>,
    #[arg(long, value_enum)]
    bound_mode: Option<BoundArg>,
    #[arg(long)]
    safety_factor: Option<f64>,
    #[arg(long)]
    calibration_episodes: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    slack_penalty: Option<f64>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    transitions: Option<PathBuf>,
    /// Run episodes on one thread.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn layer(&self) -> Result<ConfigLayer, Error> {
        let policy = match (&self.policy, &self.noise) {
            (Some(text), _) => Some(
                serde_json::from_str::<PolicySpec>(text)
                    .map_err(|e| Error::Config { field: "policy".into(), message: e.to_string() })?,
            ),
            (None, Some(amplitude)) => Some(PolicySpec::NoisyExplorer {
                amplitude: amplitude.clone(),
                schedule: Default::default(),
            }),
            (None, None) => None,
        };
        let disturbance = match self.disturbance.as_deref() {
            None => None,
            Some("default") => Some(DisturbanceSpec::Default),
            Some("none") => Some(DisturbanceSpec::None),
            Some(v) => Some(DisturbanceSpec::Scaled {
                factor: v.parse().map_err(|_| Error::Config {
                    field: "disturbance".into(),
                    message: format!("expected `default`, `none` or a number, got `{v}`"),
                })?,
            }),
        };
        let output = (self.csv.is_some() || self.summary.is_some() || self.transitions.is_some()).then(|| OutputLayer {
            csv: self.csv.clone(),
            summary: self.summary.clone(),
            transitions: self.transitions.clone(),
        });
        Ok(ConfigLayer {
            plant: self.plant.map(|p| match p {
                PlantArg::Unicycle => PlantKind::Unicycle,
                PlantArg::Quadrotor => PlantKind::Quadrotor,
            }),
            episodes: self.episodes,
            steps_per_episode: self.steps_per_episode,
            dt: self.dt,
            sample_period: self.sample_period,
            observer_gain: self.observer_gain,
            beta_gains: self.beta_gains.clone(),
            beta_kind: self.beta_kind.map(|k| match k {
                KappaArg::Linear => KappaKind::Linear,
                KappaArg::Cubic => KappaKind::Cubic,
            }),
            policy,
            disturbance,
            seed: self.seed,
            filter: self.filter.map(|f| match f {
                FilterArg::DobCbf => FilterMode::DobCbf,
                FilterArg::NominalCbf => FilterMode::NominalCbf,
                FilterArg::Off => FilterMode::Off,
            }),
            bound_mode: self.bound_mode.map(|b| match b {
                BoundArg::Theoretical => BoundMode::Theoretical,
                BoundArg::Empirical => BoundMode::Empirical,
            }),
            safety_factor: self.safety_factor,
            calibration_episodes: self.calibration_episodes,
            grid_points: self.grid_points,
            slack_penalty: self.slack_penalty,
            block_size: self.block_size,
            output,
        })
    }

    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let file = match &self.config {
            Some(path) => ConfigLayer::from_file(path)?,
            None => ConfigLayer::default(),
        };
        ExperimentConfig::from_layers(&file, &self.layer()?)
    }
}

enum Failure {
    Lib(Error),
    Aborted(usize),
    Certification(u64),
    Other(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.into()))?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &PathBuf, write: impl FnOnce(std::fs::File) -> Result<(), Error>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(write(file)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let report = run_experiment_with(&cfg, args.exec())?;
            print_json(&serde_json::json!({ "metrics": &report, "timing": report.timing }))?;
            if !report.aborted_episodes.is_empty() {
                return Err(Failure::Aborted(report.aborted_episodes.len()));
            }
        }
        Command::SweepError { config, checkpoints } => {
            let cfg = config.resolve()?;
            let checkpoints = if checkpoints.is_empty() { default_checkpoints(&cfg) } else { checkpoints };
            let table = estimation_error_sweep(&cfg, &checkpoints, config.exec())?;
            if let Some(path) = &cfg.output.csv {
                write_file(path, |f| table.write_csv(f))?;
            }
            if let Some(path) = &cfg.output.summary {
                write_file(path, |f| {
                    serde_json::to_writer_pretty(f, &serde_json::json!({ "config": &cfg, "sweep": &table }))
                        .map_err(|e| Error::Serialization(e.to_string()))
                })?;
            }
            print_json(&table)?;
        }
        Command::Profile { config, checkpoints, window, repeats } => {
            let cfg = config.resolve()?;
            let mut popts = ProfileOptions { window_episodes: window, repeats, ..ProfileOptions::default() };
            if !checkpoints.is_empty() {
                popts.checkpoints = checkpoints;
            }
            let profile = timing_profile(&cfg, &popts)?;
            if let Some(path) = &cfg.output.csv {
                write_file(path, |f| profile.write_csv(f))?;
            }
            print_json(&profile)?;
        }
        Command::CertifyBound { config, random_disturbances, trials, horizon } => {
            let cfg = config.resolve()?;
            let plant = build_plant(&cfg)?;
            let observer = ObserverConfig::new(cfg.observer_gain, cfg.sample_period)?;
            let opts = CertifyOptions {
                horizon,
                trials,
                seed: cfg.seed,
                dt: Some(cfg.dt),
                grid_points: cfg.grid_points,
                exec: config.exec(),
                ..CertifyOptions::default()
            };
            // The configured bound: closed form, or calibrated in the empirical mode.
            let bound = match cfg.bound_mode {
                BoundMode::Theoretical => compute_error_bound(&plant.model, &observer, cfg.grid_points)?,
                BoundMode::Empirical => prepare(&cfg, config.exec())?.bound,
            };
            let mut reports: Vec<(String, CertificationReport)> =
                vec![("plant".into(), certify_against(&plant.model, &observer, &plant.disturbance, &bound, &opts)?)];
            let (l_d, b_d) = (plant.model.lipschitz_const, plant.model.origin_bound);
            for k in 0..random_disturbances {
                let d = sample_lipschitz_disturbance(cfg.seed.wrapping_add(k as u64 + 1), l_d, b_d, &plant.model.state_box);
                reports.push((format!("random_{k}"), certify_bound(&plant.model, &observer, &d, &opts)?));
            }
            let violations: u64 = reports.iter().map(|(_, r)| r.violations).sum();
            let doc: serde_json::Map<String, serde_json::Value> = reports
                .iter()
                .map(|(k, r)| (k.clone(), serde_json::to_value(r).unwrap_or_default()))
                .collect();
            if let Some(path) = &cfg.output.summary {
                write_file(path, |f| {
                    serde_json::to_writer_pretty(f, &doc).map_err(|e| Error::Serialization(e.to_string()))
                })?;
            }
            print_json(&doc)?;
            if violations > 0 {
                return Err(Failure::Certification(violations));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (code, message) = match failure {
                Failure::Lib(e) => {
                    let code = match &e {
                        Error::Config { .. } | Error::InvalidParameter { .. } | Error::DimensionMismatch { .. } => exit::CONFIG,
                        Error::Io { .. } | Error::Serialization(_) => exit::IO,
                        Error::Bridge(_) => exit::BRIDGE,
                        Error::SolverFailed { .. } => exit::ABORTED,
                        Error::IntegrationBlowup { .. }
                        | Error::ObserverDivergence { .. }
                        | Error::BoundComputation(_)
                        | Error::Scheduling { .. } => exit::NUMERIC,
                    };
                    (code, e.to_string())
                }
                Failure::Aborted(n) => (exit::ABORTED, format!("{n} episode(s) aborted; see the summary")),
                Failure::Certification(n) => (exit::CERTIFICATION, format!("{n} step(s) exceeded the error bound")),
                Failure::Other(e) => (exit::OTHER, format!("{e:#}")),
            };
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
