//! Action sources standing in for the learning agent.

mod bridge;

use std::time::Duration;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlVector, StateVector};
use crate::envs::quadrotor::QuadrotorParams;
use crate::envs::unicycle::{wrap_angle, UnicycleParams};
use crate::envs::{Plant, Task};
use crate::error::{Error, Result};

pub use bridge::{BridgeError, BridgeStats, PolicyBridge, StepRequest, StepResponse, DEFAULT_TIMEOUT};

pub trait Policy: Send {
    /// Proposed input at time `t`; `last_reward` is the reward of the
    /// previous transition (0 on the first step).
    fn act(&mut self, t: f64, x: &StateVector, last_reward: f64) -> Result<ControlVector>;

    /// Called once when the episode ends.
    fn finish(&mut self, _t: f64, _x: &StateVector, _last_reward: f64) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub ControlVector);

impl Policy for ConstantPolicy {
    fn act(&mut self, _t: f64, _x: &StateVector, _r: f64) -> Result<ControlVector> {
        Ok(self.0.clone())
    }
}

/// Heading-aligned proportional controller toward a fixed goal.
#[derive(Debug, Clone)]
pub struct UnicycleTracker {
    pub goal: [f64; 2],
    pub kv: f64,
    pub kw: f64,
    pub v_max: f64,
}

impl UnicycleTracker {
    pub fn new(p: &UnicycleParams) -> Self {
        Self {
            goal: p.goal,
            kv: p.tracker.kv,
            kw: p.tracker.kw,
            v_max: p.v_range[1],
        }
    }
}

impl Policy for UnicycleTracker {
    fn act(&mut self, _t: f64, x: &StateVector, _r: f64) -> Result<ControlVector> {
        let (dx, dy) = (self.goal[0] - x[0], self.goal[1] - x[1]);
        let dist = dx.hypot(dy);
        let v = (self.kv * dist).min(self.v_max);
        let omega = if dist > 0.0 { self.kw * wrap_angle(dy.atan2(dx) - x[2]) } else { 0.0 };
        Ok(DVector::from_vec(vec![v, omega]))
    }
}

/// PD position tracking of the reference, mapped through a thrust/attitude
/// inner loop onto the two rotors.
#[derive(Debug, Clone)]
pub struct QuadrotorTracker {
    params: QuadrotorParams,
}

impl QuadrotorTracker {
    pub fn new(params: &QuadrotorParams) -> Self {
        Self { params: params.clone() }
    }
}

impl Policy for QuadrotorTracker {
    fn act(&mut self, t: f64, x: &StateVector, _r: f64) -> Result<ControlVector> {
        let p = &self.params;
        let k = p.tracker;
        let (pr, vr, ar) = (
            p.reference.position(t),
            p.reference.velocity(t),
            p.reference.acceleration(t),
        );
        let ax = ar[0] + k.kp * (pr[0] - x[0]) + k.kd * (vr[0] - x[1]);
        let az = ar[1] + k.kp * (pr[1] - x[2]) + k.kd * (vr[1] - x[3]);
        let thrust = p.mass * ax.hypot(az + p.gravity);
        let theta_des = -ax.atan2(az + p.gravity);
        let torque = p.inertia_yy * (k.k_attitude * (theta_des - x[4]) - k.k_rate * x[5]);
        let split = torque / (2.0 * p.arm);
        Ok(DVector::from_vec(vec![0.5 * thrust - split, 0.5 * thrust + split]))
    }
}

/// Wrapped policy plus uniform noise in `[-a_i, a_i]` per input.
pub struct NoisyExplorer {
    inner: Box<dyn Policy>,
    amplitude: Vec<f64>,
    rng: ChaCha8Rng,
}

impl NoisyExplorer {
    pub fn new(inner: Box<dyn Policy>, amplitude: Vec<f64>, rng: ChaCha8Rng) -> Self {
        Self { inner, amplitude, rng }
    }
}

impl Policy for NoisyExplorer {
    fn act(&mut self, t: f64, x: &StateVector, r: f64) -> Result<ControlVector> {
        let mut u = self.inner.act(t, x, r)?;
        if u.len() != self.amplitude.len() {
            return Err(Error::DimensionMismatch {
                what: "noise amplitude",
                expected: u.len(),
                actual: self.amplitude.len(),
            });
        }
        for (ui, &a) in u.iter_mut().zip(&self.amplitude) {
            // Always draw, so the stream does not depend on the amplitudes.
            let z: f64 = self.rng.random_range(-1.0..=1.0);
            *ui += a * z;
        }
        Ok(u)
    }

    fn finish(&mut self, t: f64, x: &StateVector, r: f64) -> Result<()> {
        self.inner.finish(t, x, r)
    }
}

/// Delegates every step to an external process over [`PolicyBridge`].
pub struct ExternalPolicy {
    bridge: PolicyBridge,
}

impl ExternalPolicy {
    pub fn new(bridge: PolicyBridge) -> Self {
        Self { bridge }
    }

    pub fn stats(&self) -> BridgeStats {
        self.bridge.stats()
    }
}

impl Policy for ExternalPolicy {
    fn act(&mut self, t: f64, x: &StateVector, last_reward: f64) -> Result<ControlVector> {
        let u = self.bridge.exchange(t, x.as_slice(), last_reward, false)?;
        Ok(DVector::from_vec(u))
    }

    fn finish(&mut self, t: f64, x: &StateVector, last_reward: f64) -> Result<()> {
        self.bridge.exchange(t, x.as_slice(), last_reward, true)?;
        Ok(())
    }
}

/// How the exploration amplitude changes across the episodes of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    #[default]
    Constant,
    /// Linear from the full amplitude at the first episode down to
    /// `final_fraction` of it at the last.
    LinearDecay { final_fraction: f64 },
}

impl NoiseSchedule {
    pub fn scale(&self, episode: usize, episodes: usize) -> f64 {
        match *self {
            NoiseSchedule::Constant => 1.0,
            NoiseSchedule::LinearDecay { final_fraction } => {
                if episodes <= 1 {
                    1.0
                } else {
                    let s = episode as f64 / (episodes - 1) as f64;
                    1.0 - (1.0 - final_fraction) * s
                }
            }
        }
    }
}

/// Serializable policy choice, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Constant {
        u: Vec<f64>,
    },
    NominalTracker,
    NoisyExplorer {
        amplitude: Vec<f64>,
        #[serde(default)]
        schedule: NoiseSchedule,
    },
    External {
        command: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT.as_millis() as u64
}

/// Random stream for the policy of one episode.
pub fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

impl PolicySpec {
    pub fn validate(&self, inputs: usize) -> Result<()> {
        match self {
            PolicySpec::Constant { u } if u.len() != inputs => {
                Err(Error::config("policy.u", format!("expected {inputs} entries, got {}", u.len())))
            }
            PolicySpec::NoisyExplorer { amplitude, schedule } => {
                if amplitude.len() != inputs {
                    return Err(Error::config(
                        "policy.amplitude",
                        format!("expected {inputs} entries, got {}", amplitude.len()),
                    ));
                }
                if amplitude.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                    return Err(Error::config("policy.amplitude", "entries must be finite and >= 0"));
                }
                if let NoiseSchedule::LinearDecay { final_fraction } = schedule {
                    if !(0.0..=1.0).contains(final_fraction) {
                        return Err(Error::config("policy.schedule.final_fraction", "must lie in [0, 1]"));
                    }
                }
                Ok(())
            }
            PolicySpec::External { command, timeout_ms, .. } => {
                if command.is_empty() {
                    return Err(Error::config("policy.command", "must not be empty"));
                }
                if *timeout_ms == 0 {
                    return Err(Error::config("policy.timeout_ms", "must be > 0"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Policy for `episode` of a run with `episodes` episodes.
    pub fn build(&self, plant: &Plant, seed: u64, episode: usize, episodes: usize) -> Result<Box<dyn Policy>> {
        self.validate(plant.model.m)?;
        Ok(match self {
            PolicySpec::Constant { u } => Box::new(ConstantPolicy(DVector::from_vec(u.clone()))),
            PolicySpec::NominalTracker => tracker(plant),
            PolicySpec::NoisyExplorer { amplitude, schedule } => {
                let scale = schedule.scale(episode, episodes);
                Box::new(NoisyExplorer::new(
                    tracker(plant),
                    amplitude.iter().map(|a| a * scale).collect(),
                    episode_rng(seed, episode),
                ))
            }
            PolicySpec::External { command, args, timeout_ms } => {
                let bridge = PolicyBridge::spawn(command, args, plant.model.m, Duration::from_millis(*timeout_ms))?;
                Box::new(ExternalPolicy::new(bridge))
            }
        })
    }
}

/// The plant's scripted goal-seeking controller.
pub fn tracker(plant: &Plant) -> Box<dyn Policy> {
    match &plant.task {
        Task::Reach(p) => Box::new(UnicycleTracker::new(p)),
        Task::Track(p) => Box::new(QuadrotorTracker::new(p)),
    }
}
