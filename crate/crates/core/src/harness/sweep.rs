//! Estimation error at training-step checkpoints, over independent trials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{prepare, run_single, ErrorStats, ExperimentConfig};
use crate::par::{self, Execution};

/// Trials per checkpoint.
pub const SWEEP_TRIALS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    /// Training steps elapsed before the sampled episode.
    pub checkpoint: usize,
    pub episode: usize,
    /// Per-trial mean error over samples at `t >= T`.
    pub trial_means: Vec<f64>,
    /// Statistics of `trial_means`.
    pub stats: ErrorStats,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepTable {
    pub sample_period: f64,
    pub observer_gain: f64,
    /// `false` when the disturbance vanished and errors are absolute.
    pub relative: bool,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Largest across-trial mean; the quantity checked against a tolerance.
    pub fn worst_mean(&self) -> f64 {
        self.rows.iter().map(|r| r.stats.mean).fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["checkpoint", "episode", "mean", "std", "min", "max", "samples", "relative"])
            .map_err(|e| Error::Serialization(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.checkpoint.to_string(),
                r.episode.to_string(),
                r.stats.mean.to_string(),
                r.stats.std.to_string(),
                r.stats.min.to_string(),
                r.stats.max.to_string(),
                r.stats.samples.to_string(),
                r.stats.relative.to_string(),
            ])
            .map_err(|e| Error::Serialization(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Six checkpoints spread evenly over the configured run.
pub fn default_checkpoints(cfg: &ExperimentConfig) -> Vec<usize> {
    let total = cfg.episodes.max(1) * cfg.steps_per_episode;
    (0..6).map(|k| k * total / 6).collect()
}

/// At each checkpoint `c`, replays episode `c / steps_per_episode` of
/// [`SWEEP_TRIALS`] runs seeded `seed, seed + 1, …` and summarizes the
/// per-trial mean error. Episodes are independent, so earlier episodes are
/// not simulated. Relative errors are capped at 100%; with a vanishing
/// disturbance the absolute error is reported and `relative` is `false`.
pub fn estimation_error_sweep(cfg: &ExperimentConfig, checkpoints: &[usize], exec: Execution) -> Result<SweepTable> {
    let prep = prepare(cfg, exec)?;
    let mut opts = prep.options.clone();
    opts.timing = false;

    let jobs: Vec<(usize, usize)> = (0..checkpoints.len())
        .flat_map(|i| (0..SWEEP_TRIALS).map(move |j| (i, j)))
        .collect();
    let records = par::map_slice(exec, &jobs, |&(i, j)| {
        let episode = checkpoints[i] / cfg.steps_per_episode;
        run_single(cfg, &prep, cfg.seed.wrapping_add(j as u64), episode, &opts)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let relative = records
        .iter()
        .flat_map(|r| r.estimation.iter())
        .all(|s| s.relative().is_some());

    let mut rows = Vec::with_capacity(checkpoints.len());
    for (i, &c) in checkpoints.iter().enumerate() {
        let trial_means: Vec<f64> = records[i * SWEEP_TRIALS..(i + 1) * SWEEP_TRIALS]
            .iter()
            .filter_map(|r| {
                let v: Vec<f64> = r
                    .estimation
                    .iter()
                    .map(|s| if relative { s.relative().unwrap_or(0.0) } else { s.abs_error })
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let stats = ErrorStats::from_values(&trial_means, relative).ok_or_else(|| {
            Error::config("steps_per_episode", "sweep needs at least two control steps per episode")
        })?;
        rows.push(SweepRow {
            checkpoint: c,
            episode: c / cfg.steps_per_episode,
            trial_means,
            stats,
        });
    }
    Ok(SweepTable {
        sample_period: cfg.sample_period,
        observer_gain: cfg.observer_gain,
        relative,
        rows,
    })
}
