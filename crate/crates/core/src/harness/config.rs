//! Experiment configuration: per-plant defaults, a TOML file layer and a
//! command-line layer, merged in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dob::{BoundMode, DEFAULT_GRID_POINTS};
use crate::envs::{FilterMode, PlantKind};
use crate::error::{Error, Result};
use crate::hocbf::KappaKind;
use crate::policy::{NoiseSchedule, PolicySpec};
use crate::qp::DEFAULT_PENALTY;

/// Ground-truth disturbance used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    /// The plant's built-in profile.
    #[default]
    Default,
    None,
    /// Built-in profile with its magnitude scaled.
    Scaled { factor: f64 },
}

impl DisturbanceSpec {
    pub fn factor(&self) -> f64 {
        match *self {
            DisturbanceSpec::Default => 1.0,
            DisturbanceSpec::None => 0.0,
            DisturbanceSpec::Scaled { factor } => factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    /// One row per episode.
    pub csv: Option<PathBuf>,
    /// Config echo, metrics and timing.
    pub summary: Option<PathBuf>,
    /// Newline-delimited JSON transitions.
    pub transitions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantKind,
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Integration step, seconds.
    pub dt: f64,
    /// Observer sampling period `T`, also the control period.
    pub sample_period: f64,
    /// Predictor gain `a`.
    pub observer_gain: f64,
    /// One class-K gain per barrier order.
    pub beta_gains: Vec<f64>,
    pub beta_kind: KappaKind,
    pub policy: PolicySpec,
    pub disturbance: DisturbanceSpec,
    pub seed: u64,
    pub filter: FilterMode,
    pub bound_mode: BoundMode,
    /// Multiplier on observed errors in the empirical bound mode.
    pub safety_factor: f64,
    /// Unfiltered episodes used to calibrate the empirical bound.
    pub calibration_episodes: usize,
    /// Grid points per axis for the bound search.
    pub grid_points: usize,
    pub slack_penalty: f64,
    /// Episodes per violation-rate block.
    pub block_size: usize,
    #[serde(default)]
    pub output: OutputPaths,
}

/// Every field optional; used for the file and command-line layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub plant: Option<PlantKind>,
    pub episodes: Option<usize>,
    pub steps_per_episode: Option<usize>,
    pub dt: Option<f64>,
    pub sample_period: Option<f64>,
    pub observer_gain: Option<f64>,
    pub beta_gains: Option<Vec<f64>>,
    pub beta_kind: Option<KappaKind>,
    pub policy: Option<PolicySpec>,
    pub disturbance: Option<DisturbanceSpec>,
    pub seed: Option<u64>,
    pub filter: Option<FilterMode>,
    pub bound_mode: Option<BoundMode>,
    pub safety_factor: Option<f64>,
    pub calibration_episodes: Option<usize>,
    pub grid_points: Option<usize>,
    pub slack_penalty: Option<f64>,
    pub block_size: Option<usize>,
    pub output: Option<OutputLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputLayer {
    pub csv: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub transitions: Option<PathBuf>,
}

impl ConfigLayer {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .unwrap_or_else(|| "<file>".into());
            Error::config(field, e.message().to_string())
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

impl ExperimentConfig {
    pub fn defaults(plant: PlantKind) -> Self {
        match plant {
            PlantKind::Unicycle => Self {
                plant,
                episodes: 200,
                steps_per_episode: 1000,
                dt: 1e-3,
                sample_period: 1e-2,
                observer_gain: 1.0,
                beta_gains: vec![5.0],
                beta_kind: KappaKind::Linear,
                policy: PolicySpec::NoisyExplorer {
                    amplitude: vec![1.0, 2.0],
                    schedule: NoiseSchedule::Constant,
                },
                disturbance: DisturbanceSpec::Default,
                seed: 0,
                filter: FilterMode::DobCbf,
                bound_mode: BoundMode::Theoretical,
                safety_factor: 2.0,
                calibration_episodes: 20,
                grid_points: DEFAULT_GRID_POINTS,
                slack_penalty: DEFAULT_PENALTY,
                block_size: 50,
                output: OutputPaths::default(),
            },
            PlantKind::Quadrotor => Self {
                plant,
                episodes: 500,
                steps_per_episode: 600,
                beta_gains: vec![5.0, 5.0],
                policy: PolicySpec::NoisyExplorer {
                    amplitude: vec![0.03, 0.03],
                    schedule: NoiseSchedule::Constant,
                },
                bound_mode: BoundMode::Empirical,
                block_size: 500,
                ..Self::defaults(PlantKind::Unicycle)
            },
        }
    }

    /// Defaults for the chosen plant, then `file`, then `cli`.
    pub fn from_layers(file: &ConfigLayer, cli: &ConfigLayer) -> Result<Self> {
        let plant = cli.plant.or(file.plant).unwrap_or(PlantKind::Unicycle);
        let mut cfg = Self::defaults(plant);
        cfg.apply(file);
        cfg.apply(cli);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, layer: &ConfigLayer) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = &layer.$f { self.$f = v.clone(); } )* };
        }
        take!(
            plant,
            episodes,
            steps_per_episode,
            dt,
            sample_period,
            observer_gain,
            beta_gains,
            beta_kind,
            policy,
            disturbance,
            seed,
            filter,
            bound_mode,
            safety_factor,
            calibration_episodes,
            grid_points,
            slack_penalty,
            block_size
        );
        if let Some(out) = &layer.output {
            if out.csv.is_some() {
                self.output.csv = out.csv.clone();
            }
            if out.summary.is_some() {
                self.output.summary = out.summary.clone();
            }
            if out.transitions.is_some() {
                self.output.transitions = out.transitions.clone();
            }
        }
    }

    pub fn inputs(&self) -> usize {
        2
    }

    pub fn relative_degree(&self) -> usize {
        match self.plant {
            PlantKind::Unicycle => 1,
            PlantKind::Quadrotor => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be finite and > 0, got {v}")))
            }
        }
        positive("dt", self.dt)?;
        positive("sample_period", self.sample_period)?;
        positive("observer_gain", self.observer_gain)?;
        positive("safety_factor", self.safety_factor)?;
        positive("slack_penalty", self.slack_penalty)?;
        let ratio = self.sample_period / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
            return Err(Error::config(
                "sample_period",
                format!("must be an integer multiple of dt = {}, got {}", self.dt, self.sample_period),
            ));
        }
        if self.steps_per_episode == 0 {
            return Err(Error::config("steps_per_episode", "must be >= 1"));
        }
        if self.block_size == 0 {
            return Err(Error::config("block_size", "must be >= 1"));
        }
        if self.grid_points < 2 {
            return Err(Error::config("grid_points", "must be >= 2"));
        }
        let m = self.relative_degree();
        if self.beta_gains.len() != m {
            return Err(Error::config(
                "beta_gains",
                format!("{} plant needs {m} gains, got {}", self.plant.name(), self.beta_gains.len()),
            ));
        }
        for (i, g) in self.beta_gains.iter().enumerate() {
            positive(&format!("beta_gains[{i}]"), *g)?;
        }
        if let DisturbanceSpec::Scaled { factor } = self.disturbance {
            if !(factor >= 0.0 && factor.is_finite()) {
                return Err(Error::config("disturbance.factor", "must be finite and >= 0"));
            }
        }
        if self.bound_mode == BoundMode::Empirical && self.calibration_episodes == 0 {
            return Err(Error::config("calibration_episodes", "empirical bound mode needs at least one"));
        }
        self.policy.validate(self.inputs())?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}
