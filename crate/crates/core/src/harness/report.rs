use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dob::ErrorBound;
use crate::envs::{EpisodeRecord, FilterMode, PlantKind};
use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockStats {
    pub index: usize,
    pub first_episode: usize,
    pub episodes: usize,
    pub violating: usize,
    /// Percent.
    pub violation_rate: f64,
    pub relaxation_events: usize,
}

/// `{mean, std, min, max}` of estimation errors; relative (fraction, capped
/// at 1) unless the disturbance vanished, in which case absolute.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub samples: usize,
    pub relative: bool,
}

impl ErrorStats {
    pub fn from_values(values: &[f64], relative: bool) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            samples: values.len(),
            relative,
        })
    }

    /// Relative errors when every sample has a nonzero disturbance, absolute
    /// errors otherwise.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EpisodeRecord> + Clone) -> Option<Self> {
        let samples = || records.clone().into_iter().flat_map(|r| r.estimation.iter());
        let relative: Option<Vec<f64>> = samples().map(|s| s.relative()).collect();
        match relative {
            Some(v) => Self::from_values(&v, true),
            None => Self::from_values(&samples().map(|s| s.abs_error).collect::<Vec<_>>(), false),
        }
    }
}

/// Wall-clock summary; kept out of the CSV so metric files stay reproducible.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq)]
pub struct TimingSummary {
    /// Seconds of observer + assembly + QP per 1000 control steps.
    pub filter_per_1000_steps: f64,
    pub observer_per_1000_steps: f64,
    pub assembly_per_1000_steps: f64,
    pub qp_per_1000_steps: f64,
    pub plant_per_1000_steps: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub plant: PlantKind,
    pub filter: FilterMode,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub bound: ErrorBound,
    pub blocks: Vec<BlockStats>,
    pub violating_episodes: usize,
    /// Percent over all episodes.
    pub violation_rate: f64,
    pub relaxation_events: usize,
    /// Episodes with at least one relaxed QP, ascending.
    pub relaxation_episodes: Vec<usize>,
    /// Violating episodes with no relaxation whose first violation came
    /// after the first sampling period; expected empty.
    pub unexplained_violations: Vec<usize>,
    pub aborted_episodes: Vec<usize>,
    /// Integration steps where the estimate left its bound.
    pub bound_exceedances: usize,
    pub episodes_leaving_state_box: usize,
    pub filter_active_fraction: f64,
    pub estimation: Option<ErrorStats>,
    pub min_h: Vec<f64>,
    pub mean_return: f64,
    #[serde(skip)]
    pub timing: TimingSummary,
}

/// One CSV row per episode.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub block: usize,
    pub violation: bool,
    pub min_h: f64,
    pub first_violation_time: Option<f64>,
    pub relaxations: usize,
    pub max_slack: f64,
    pub filter_active_steps: usize,
    pub steps: usize,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    pub mean_estimation_error: Option<f64>,
    pub estimation_error_relative: bool,
    pub max_estimation_error: f64,
    pub bound_exceedances: usize,
    pub left_state_box: bool,
    pub total_reward: f64,
}

impl MetricsReport {
    pub fn from_records(cfg: &ExperimentConfig, bound: ErrorBound, records: &[EpisodeRecord]) -> Self {
        let blocks = records
            .chunks(cfg.block_size)
            .enumerate()
            .map(|(i, chunk)| {
                let violating = chunk.iter().filter(|r| r.violation).count();
                BlockStats {
                    index: i,
                    first_episode: i * cfg.block_size,
                    episodes: chunk.len(),
                    violating,
                    violation_rate: 100.0 * violating as f64 / chunk.len() as f64,
                    relaxation_events: chunk.iter().map(|r| r.relaxations.len()).sum(),
                }
            })
            .collect();
        let violating = records.iter().filter(|r| r.violation).count();
        let steps: usize = records.iter().map(|r| r.steps_completed).sum();
        let active: usize = records.iter().map(|r| r.filter_active_steps).sum();

        let mut timing = crate::envs::PhaseTiming::default();
        for r in records {
            timing.add(&r.timing);
        }
        let per_1000 = |d: std::time::Duration| {
            if timing.steps == 0 {
                0.0
            } else {
                d.as_secs_f64() * 1000.0 / timing.steps as f64
            }
        };

        Self {
            plant: cfg.plant,
            filter: cfg.filter,
            episodes: records.len(),
            steps_per_episode: cfg.steps_per_episode,
            bound,
            blocks,
            violating_episodes: violating,
            violation_rate: if records.is_empty() { 0.0 } else { 100.0 * violating as f64 / records.len() as f64 },
            relaxation_events: records.iter().map(|r| r.relaxations.len()).sum(),
            relaxation_episodes: (0..records.len()).filter(|&e| !records[e].relaxations.is_empty()).collect(),
            unexplained_violations: (0..records.len())
                .filter(|&e| {
                    let r = &records[e];
                    r.violation
                        && r.relaxations.is_empty()
                        && r.first_violation_time.is_some_and(|t| t >= cfg.sample_period * (1.0 - 1e-9))
                })
                .collect(),
            aborted_episodes: (0..records.len()).filter(|&e| records[e].abort.is_some()).collect(),
            bound_exceedances: records.iter().map(|r| r.bound_exceedances).sum(),
            episodes_leaving_state_box: records.iter().filter(|r| r.left_state_box).count(),
            filter_active_fraction: if steps == 0 { 0.0 } else { active as f64 / steps as f64 },
            estimation: ErrorStats::from_records(records),
            min_h: records.iter().map(|r| r.min_h).collect(),
            mean_return: if records.is_empty() {
                0.0
            } else {
                records.iter().map(|r| r.total_reward).sum::<f64>() / records.len() as f64
            },
            timing: TimingSummary {
                filter_per_1000_steps: per_1000(timing.filter_overhead()),
                observer_per_1000_steps: per_1000(timing.observer),
                assembly_per_1000_steps: per_1000(timing.assembly),
                qp_per_1000_steps: per_1000(timing.qp),
                plant_per_1000_steps: per_1000(timing.plant),
                steps: timing.steps,
            },
        }
    }

    pub fn rows(&self, records: &[EpisodeRecord], block_size: usize) -> Vec<EpisodeRow> {
        records
            .iter()
            .enumerate()
            .map(|(e, r)| {
                let stats = ErrorStats::from_records(std::slice::from_ref(r));
                EpisodeRow {
                    episode: e,
                    block: e / block_size.max(1),
                    violation: r.violation,
                    min_h: r.min_h,
                    first_violation_time: r.first_violation_time,
                    relaxations: r.relaxations.len(),
                    max_slack: r.relaxations.iter().map(|ev| ev.max_slack).fold(0.0, f64::max),
                    filter_active_steps: r.filter_active_steps,
                    steps: r.steps_completed,
                    aborted: r.abort.is_some(),
                    abort_reason: r.abort.clone(),
                    mean_estimation_error: stats.map(|s| s.mean),
                    estimation_error_relative: stats.is_none_or(|s| s.relative),
                    max_estimation_error: r.estimation.iter().map(|s| s.abs_error).fold(0.0, f64::max),
                    bound_exceedances: r.bound_exceedances,
                    left_state_box: r.left_state_box,
                    total_reward: r.total_reward,
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W, records: &[EpisodeRecord]) -> Result<()> {
        let block_size = self.blocks.first().map_or(1, |b| b.episodes.max(1));
        let mut w = csv::Writer::from_writer(out);
        let rows = self.rows(records, block_size);
        if rows.is_empty() {
            // Header only, so empty runs still produce a parseable file.
            w.write_record(EPISODE_COLUMNS).map_err(csv_err)?;
        }
        for row in rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// `{"config": …, "metrics": …, "timing": …}`; only `timing` varies
    /// between identical runs.
    pub fn write_summary<W: Write>(&self, mut out: W, cfg: &ExperimentConfig) -> Result<()> {
        let doc = serde_json::json!({
            "config": cfg,
            "metrics": self,
            "timing": self.timing,
        });
        serde_json::to_writer_pretty(&mut out, &doc).map_err(|e| Error::Serialization(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io("<summary>", e))?;
        out.flush().map_err(|e| Error::io("<summary>", e))
    }
}

pub const EPISODE_COLUMNS: [&str; 17] = [
    "episode",
    "block",
    "violation",
    "min_h",
    "first_violation_time",
    "relaxations",
    "max_slack",
    "filter_active_steps",
    "steps",
    "aborted",
    "abort_reason",
    "mean_estimation_error",
    "estimation_error_relative",
    "max_estimation_error",
    "bound_exceedances",
    "left_state_box",
    "total_reward",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Serialization(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_are_ordered() {
        let s = ErrorStats::from_values(&[0.2, 0.1, 0.4], true).unwrap();
        assert!(s.min <= s.mean && s.mean <= s.max);
        assert!((s.mean - 0.7 / 3.0).abs() < 1e-15);
        assert!(ErrorStats::from_values(&[], true).is_none());
    }
}
