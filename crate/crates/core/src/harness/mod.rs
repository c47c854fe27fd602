//! Configuration-driven experiments: episode batches, violation-rate blocks,
//! estimation-error statistics and per-phase timing.

mod config;
mod profile;
mod report;
mod sweep;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::DMatrix;

use crate::dob::{compute_error_bound, BoundMode, ErrorBound, ObserverConfig};
use crate::envs::{
    run_episode, write_transitions_ndjson, EpisodeOptions, EpisodeRecord, FilterMode, Plant, PlantKind,
    QuadrotorParams, UnicycleParams,
};
use crate::error::{Error, Result};
use crate::hocbf::ClassKappa;
use crate::par::{self, Execution};

pub use config::{ConfigLayer, DisturbanceSpec, ExperimentConfig, OutputLayer, OutputPaths};
pub use profile::{timing_profile, ProfileOptions, TimingProfile, TimingRow};
pub use report::{BlockStats, EpisodeRow, ErrorStats, MetricsReport, TimingSummary, EPISODE_COLUMNS};
pub use sweep::{default_checkpoints, estimation_error_sweep, SweepRow, SweepTable, SWEEP_TRIALS};

/// Offset applied to the run seed for calibration episodes, so calibration
/// never replays the evaluated episodes.
const CALIBRATION_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Plant, error bound and episode options resolved from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub plant: Plant,
    pub bound: ErrorBound,
    pub options: EpisodeOptions,
}

/// Builds the plant named by the config with its gains and disturbance.
pub fn build_plant(cfg: &ExperimentConfig) -> Result<Plant> {
    let factor = cfg.disturbance.factor();
    match cfg.plant {
        PlantKind::Unicycle => {
            let mut p = UnicycleParams::default();
            p.beta = ClassKappa::new(cfg.beta_kind, cfg.beta_gains[0])?;
            p.slip = p.slip.scaled(factor);
            Plant::unicycle(p)
        }
        PlantKind::Quadrotor => {
            let mut p = QuadrotorParams::default();
            p.beta1 = ClassKappa::new(cfg.beta_kind, cfg.beta_gains[0])?;
            p.beta2 = ClassKappa::new(cfg.beta_kind, cfg.beta_gains[1])?;
            p.disturbance = p.disturbance.scaled(factor);
            Plant::quadrotor(p)
        }
    }
}

fn base_options(cfg: &ExperimentConfig, plant: &Plant, bound: ErrorBound) -> Result<EpisodeOptions> {
    Ok(EpisodeOptions {
        steps: cfg.steps_per_episode,
        dt: cfg.dt,
        observer: ObserverConfig::new(cfg.observer_gain, cfg.sample_period)?,
        bound,
        filter: cfg.filter,
        weight: DMatrix::identity(plant.model.m, plant.model.m),
        penalty: cfg.slack_penalty,
        record_transitions: false,
        timing: true,
    })
}

/// Resolves the plant and the error bound. In the empirical mode this runs
/// `calibration_episodes` unfiltered episodes and scales the largest observed
/// errors by the safety factor.
pub fn prepare(cfg: &ExperimentConfig, exec: Execution) -> Result<Prepared> {
    cfg.validate()?;
    let plant = build_plant(cfg)?;
    let observer = ObserverConfig::new(cfg.observer_gain, cfg.sample_period)?;
    let bound = match cfg.bound_mode {
        BoundMode::Theoretical => compute_error_bound(&plant.model, &observer, cfg.grid_points)?,
        BoundMode::Empirical => calibrate(cfg, &plant, exec)?,
    };
    let options = base_options(cfg, &plant, bound)?;
    Ok(Prepared { plant, bound, options })
}

fn calibrate(cfg: &ExperimentConfig, plant: &Plant, exec: Execution) -> Result<ErrorBound> {
    let placeholder = ErrorBound::empirical(0.0, 0.0, 1.0, cfg.sample_period);
    let mut opts = base_options(cfg, plant, placeholder)?;
    opts.filter = FilterMode::Off;
    opts.timing = false;
    let seed = cfg.seed.wrapping_add(CALIBRATION_SEED_OFFSET);
    let records = par::map_indexed(exec, cfg.calibration_episodes, |e| -> Result<EpisodeRecord> {
        let mut policy = cfg.policy.build(plant, seed, e, cfg.calibration_episodes)?;
        run_episode(plant, &opts, policy.as_mut())
    });
    let (mut first, mut after) = (0.0f64, 0.0f64);
    for r in records {
        let r = r?;
        first = first.max(r.max_error_first_interval);
        after = after.max(r.max_error_after_first_sample);
    }
    Ok(ErrorBound::empirical(first, after, cfg.safety_factor, cfg.sample_period))
}

/// Runs one episode of a prepared experiment; policy construction failures
/// become aborted episodes.
pub fn run_single(cfg: &ExperimentConfig, prep: &Prepared, seed: u64, episode: usize, opts: &EpisodeOptions) -> Result<EpisodeRecord> {
    match cfg.policy.build(&prep.plant, seed, episode, cfg.episodes) {
        Ok(mut policy) => run_episode(&prep.plant, opts, policy.as_mut()),
        Err(e @ Error::Config { .. }) => Err(e),
        Err(e) => Ok(EpisodeRecord {
            abort: Some(format!("policy: {e}")),
            min_h: prep.plant.min_barrier(&prep.plant.initial_state),
            ..EpisodeRecord::default()
        }),
    }
}

/// [`run_experiment_with`] on the default execution mode.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    run_experiment_with(cfg, Execution::default())
}

/// Runs all episodes, aggregates metrics and writes the configured outputs.
pub fn run_experiment_with(cfg: &ExperimentConfig, exec: Execution) -> Result<MetricsReport> {
    let prep = prepare(cfg, exec)?;
    let mut opts = prep.options.clone();
    opts.record_transitions = cfg.output.transitions.is_some();
    let records: Vec<EpisodeRecord> = par::map_indexed(exec, cfg.episodes, |e| run_single(cfg, &prep, cfg.seed, e, &opts))
        .into_iter()
        .collect::<Result<_>>()?;
    let report = MetricsReport::from_records(cfg, prep.bound, &records);
    write_outputs(cfg, &report, &records)?;
    Ok(report)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_outputs(cfg: &ExperimentConfig, report: &MetricsReport, records: &[EpisodeRecord]) -> Result<()> {
    if let Some(path) = &cfg.output.csv {
        report.write_csv(create(path)?, records).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })?;
    }
    if let Some(path) = &cfg.output.summary {
        report.write_summary(create(path)?, cfg)?;
    }
    if let Some(path) = &cfg.output.transitions {
        let mut out = create(path)?;
        for (e, r) in records.iter().enumerate() {
            write_transitions_ndjson(&mut out, e, &r.transitions)?;
        }
        std::io::Write::flush(&mut out).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
