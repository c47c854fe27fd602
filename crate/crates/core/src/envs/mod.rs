//! Benchmark plants and the filtered episode loop.

pub mod episode;
pub mod quadrotor;
pub mod unicycle;

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlVector, DisturbanceFn, StateVector, SystemModel};
use crate::error::Result;
use crate::hocbf::ConstraintSpec;

pub use episode::{
    run_episode, write_transitions_ndjson, EpisodeOptions, EpisodeRecord, EstimationSample, FilterMode, PhaseTiming,
    RelaxationEvent, Transition,
};
pub use quadrotor::{CircleReference, QuadDisturbance, QuadrotorParams};
pub use unicycle::{Obstacle, SlipProfile, UnicycleParams};

pub const REWARD_MIN: f64 = -10.0;
pub const REWARD_MAX: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Unicycle,
    Quadrotor,
}

impl PlantKind {
    pub fn name(self) -> &'static str {
        match self {
            PlantKind::Unicycle => "unicycle",
            PlantKind::Quadrotor => "quadrotor",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Task {
    /// Drive to a goal between obstacles.
    Reach(UnicycleParams),
    /// Track a circle inside the boundary.
    Track(QuadrotorParams),
}

/// Everything an episode needs: nominal model, barriers, the ground-truth
/// disturbance and the task.
#[derive(Debug, Clone)]
pub struct Plant {
    pub kind: PlantKind,
    pub model: SystemModel,
    pub constraints: Vec<ConstraintSpec>,
    pub disturbance: DisturbanceFn,
    pub initial_state: StateVector,
    pub task: Task,
}

impl Plant {
    pub fn unicycle(params: UnicycleParams) -> Result<Self> {
        Ok(Self {
            kind: PlantKind::Unicycle,
            model: params.model()?,
            constraints: params.constraints(),
            disturbance: params.disturbance(),
            initial_state: params.initial_state(),
            task: Task::Reach(params),
        })
    }

    pub fn quadrotor(params: QuadrotorParams) -> Result<Self> {
        Ok(Self {
            kind: PlantKind::Quadrotor,
            model: params.model()?,
            constraints: vec![params.constraint()],
            disturbance: params.disturbance_fn(),
            initial_state: params.initial_state(),
            task: Task::Track(params),
        })
    }

    /// Swaps the ground-truth disturbance; the model's Lipschitz data follow
    /// the declared constants of `d`.
    pub fn with_disturbance(mut self, d: DisturbanceFn) -> Self {
        self.model = self.model.with_disturbance_bounds(d.declared_lipschitz, d.declared_origin_bound);
        self.disturbance = d;
        self
    }

    pub fn barrier_values(&self, x: &StateVector) -> Vec<f64> {
        self.constraints.iter().map(|c| (c.h)(x)).collect()
    }

    pub fn min_barrier(&self, x: &StateVector) -> f64 {
        self.constraints.iter().map(|c| (c.h)(x)).fold(f64::INFINITY, f64::min)
    }

    pub fn reward(&self, x: &StateVector, u: &ControlVector, t: f64) -> f64 {
        match &self.task {
            Task::Reach(p) => goal_reward([x[0], x[1]], p.goal, u, p.control_weight),
            Task::Track(p) => goal_reward([x[0], x[2]], p.reference.position(t), u, p.control_weight),
        }
    }

    /// Input that holds the plant at rest with no disturbance.
    pub fn equilibrium_input(&self) -> ControlVector {
        match &self.task {
            Task::Reach(_) => DVector::zeros(2),
            Task::Track(p) => DVector::from_element(2, p.hover_thrust()),
        }
    }

    /// Shifts periodic coordinates back into their principal range. Plant and
    /// predictor move by the same multiple of the period, so the prediction
    /// error is untouched.
    pub fn rechart(&self, x: &mut StateVector, x_hat: &mut StateVector) {
        if let Task::Reach(_) = self.task {
            let wrapped = unicycle::wrap_angle(x[2]);
            let shift = wrapped - x[2];
            if shift.abs() > PI {
                x[2] = wrapped;
                x_hat[2] += shift;
            }
        }
    }
}

/// `-(‖p - goal‖² + w ‖u‖²)`, clipped to `[REWARD_MIN, REWARD_MAX]`.
pub fn goal_reward(p: [f64; 2], goal: [f64; 2], u: &ControlVector, weight: f64) -> f64 {
    let d2 = (p[0] - goal[0]).powi(2) + (p[1] - goal[1]).powi(2);
    (-(d2 + weight * u.norm_squared())).clamp(REWARD_MIN, REWARD_MAX)
}
