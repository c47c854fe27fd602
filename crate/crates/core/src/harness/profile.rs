//! Wall-clock cost of the filter at training-step checkpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::envs::PhaseTiming;
use crate::error::{Error, Result};
use crate::harness::{prepare, run_single, ExperimentConfig};
use crate::par::Execution;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProfileOptions {
    /// Training steps at which to measure.
    pub checkpoints: Vec<usize>,
    /// Consecutive episodes timed per checkpoint.
    pub window_episodes: usize,
    /// Repeats per episode; the fastest is kept.
    pub repeats: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            checkpoints: (0..=10).map(|k| k * 50_000).collect(),
            window_episodes: 3,
            repeats: 11,
        }
    }
}

/// Seconds per 1000 control steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TimingRow {
    pub checkpoint: usize,
    pub episode: usize,
    pub observer: f64,
    pub assembly: f64,
    pub qp: f64,
    /// `observer + assembly + qp`.
    pub filter: f64,
    pub plant: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimingProfile {
    pub rows: Vec<TimingRow>,
    /// Mean filter cost, seconds per 1000 steps.
    pub mean_filter: f64,
    /// Least-squares slope of the filter cost, per 10^5 training steps.
    pub slope_per_1e5_steps: f64,
    /// `|slope| / mean`.
    pub relative_slope: f64,
}

impl TimingProfile {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Serialization(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn per_1000(d: Duration, steps: usize) -> f64 {
    if steps == 0 {
        0.0
    } else {
        d.as_secs_f64() * 1000.0 / steps as f64
    }
}

/// Times the filter phases sequentially at each checkpoint. Episodes are
/// independent, so checkpoint `c` replays episodes starting at
/// `c / steps_per_episode` without simulating the ones before it.
pub fn timing_profile(cfg: &ExperimentConfig, popts: &ProfileOptions) -> Result<TimingProfile> {
    if popts.window_episodes == 0 || popts.repeats == 0 {
        return Err(Error::config("profile", "window_episodes and repeats must be >= 1"));
    }
    let prep = prepare(cfg, Execution::Sequential)?;
    let mut opts = prep.options.clone();
    opts.timing = true;
    opts.record_transitions = false;

    // Repeats are interleaved across checkpoints so slow drifts in machine
    // load affect every checkpoint alike. Each episode keeps its fastest
    // repeat; a checkpoint sums its window.
    let w = popts.window_episodes;
    let mut fastest: Vec<Option<PhaseTiming>> = vec![None; popts.checkpoints.len() * w];
    for _ in 0..popts.repeats {
        for (i, &c) in popts.checkpoints.iter().enumerate() {
            let first = c / cfg.steps_per_episode;
            for k in 0..w {
                let t = run_single(cfg, &prep, cfg.seed, first + k, &opts)?.timing;
                let slot = &mut fastest[i * w + k];
                if slot.as_ref().is_none_or(|b| t.filter_overhead() < b.filter_overhead()) {
                    *slot = Some(t);
                }
            }
        }
    }
    let best = fastest.chunks(w).map(|chunk| {
        let mut total = PhaseTiming::default();
        for t in chunk.iter().flatten() {
            total.add(t);
        }
        Some(total)
    });
    let rows: Vec<TimingRow> = best
        .into_iter()
        .zip(&popts.checkpoints)
        .map(|(t, &c)| {
            let t = t.unwrap_or_default();
            TimingRow {
                checkpoint: c,
                episode: c / cfg.steps_per_episode,
                observer: per_1000(t.observer, t.steps),
                assembly: per_1000(t.assembly, t.steps),
                qp: per_1000(t.qp, t.steps),
                filter: per_1000(t.filter_overhead(), t.steps),
                plant: per_1000(t.plant, t.steps),
                steps: t.steps,
            }
        })
        .collect();

    let n = rows.len() as f64;
    let mean_filter = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.filter).sum::<f64>() / n };
    let mean_c = rows.iter().map(|r| r.checkpoint as f64).sum::<f64>() / n.max(1.0);
    let sxx: f64 = rows.iter().map(|r| (r.checkpoint as f64 - mean_c).powi(2)).sum();
    let sxy: f64 = rows
        .iter()
        .map(|r| (r.checkpoint as f64 - mean_c) * (r.filter - mean_filter))
        .sum();
    let slope_per_1e5_steps = if sxx > 0.0 { sxy / sxx * 1e5 } else { 0.0 };
    let relative_slope = if mean_filter > 0.0 { slope_per_1e5_steps.abs() / mean_filter } else { 0.0 };
    Ok(TimingProfile {
        rows,
        mean_filter,
        slope_per_1e5_steps,
        relative_slope,
    })
}
