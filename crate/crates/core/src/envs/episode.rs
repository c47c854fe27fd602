//! One filtered episode: policy → observer → constraint assembly → QP → plant.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dob::{ErrorBound, ObserverConfig, ObserverState};
use crate::dynamics::step_rk4_stages;
use crate::envs::Plant;
use crate::error::{check_dim, Error, Result};
use crate::hocbf::AffineConstraint;
use crate::policy::Policy;
use crate::qp::{QpProblem, QpSolver, QpStatus};

/// Distance below which the safe input counts as unchanged.
pub const FILTER_ACTIVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Observer-robustified barrier constraint.
    #[default]
    DobCbf,
    /// Barrier constraint on the nominal model (`d̂ = 0`, `δ = 0`).
    NominalCbf,
    /// Policy action clamped to the input box.
    Off,
}

#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    /// Control steps; one QP per sampling period `T`.
    pub steps: usize,
    pub dt: f64,
    pub observer: ObserverConfig,
    pub bound: ErrorBound,
    pub filter: FilterMode,
    /// QP weight `P`.
    pub weight: DMatrix<f64>,
    pub penalty: f64,
    pub record_transitions: bool,
    pub timing: bool,
}

/// One control step, as handed to an external trainer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub u_rl: Vec<f64>,
    pub u_safe: Vec<f64>,
    pub x_next: Vec<f64>,
    pub reward: f64,
    pub filter_active: bool,
    pub slack_used: bool,
    /// Smallest barrier value over the integration steps of this interval.
    pub h_min: f64,
    pub d_hat: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EstimationSample {
    pub step: usize,
    /// `‖d̂ - d(x)‖` right after the estimation update.
    pub abs_error: f64,
    /// `‖d(x)‖`.
    pub magnitude: f64,
}

impl EstimationSample {
    /// `abs_error / magnitude`, capped at 1; `None` when `d(x) = 0`.
    pub fn relative(&self) -> Option<f64> {
        (self.magnitude > 0.0).then(|| (self.abs_error / self.magnitude).min(1.0))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RelaxationEvent {
    pub step: usize,
    pub t: f64,
    pub max_slack: f64,
}

/// Wall-clock per phase, summed over the episode.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub observer: Duration,
    pub assembly: Duration,
    pub qp: Duration,
    pub plant: Duration,
    pub steps: usize,
}

impl PhaseTiming {
    pub fn filter_overhead(&self) -> Duration {
        self.observer + self.assembly + self.qp
    }

    pub fn add(&mut self, other: &PhaseTiming) {
        self.observer += other.observer;
        self.assembly += other.assembly;
        self.qp += other.qp;
        self.plant += other.plant;
        self.steps += other.steps;
    }
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeRecord {
    /// Empty unless `record_transitions` was set.
    pub transitions: Vec<Transition>,
    pub steps_completed: usize,
    pub violation: bool,
    pub min_h: f64,
    pub first_violation_time: Option<f64>,
    pub relaxations: Vec<RelaxationEvent>,
    pub filter_active_steps: usize,
    pub estimation: Vec<EstimationSample>,
    /// Integration steps where `‖d̂ - d(x)‖ > δ(t)`.
    pub bound_exceedances: usize,
    pub max_error_first_interval: f64,
    pub max_error_after_first_sample: f64,
    pub total_reward: f64,
    pub left_state_box: bool,
    /// Reason the episode stopped early.
    pub abort: Option<String>,
    pub timing: PhaseTiming,
}

macro_rules! timed {
    ($on:expr, $slot:expr, $body:expr) => {{
        if $on {
            let start = Instant::now();
            let out = $body;
            $slot += start.elapsed();
            out
        } else {
            $body
        }
    }};
}

/// Runs one episode. Solver failures, integration blow-ups and policy bridge
/// errors end the episode early and are reported in `abort`; the returned
/// error is reserved for malformed options.
pub fn run_episode(plant: &Plant, opts: &EpisodeOptions, policy: &mut dyn Policy) -> Result<EpisodeRecord> {
    let model = &plant.model;
    check_dim("initial state", model.n, plant.initial_state.len())?;
    check_dim("QP weight", model.m, opts.weight.nrows())?;
    if opts.weight.clone().cholesky().is_none() {
        return Err(Error::param("QP weight", "must be positive definite"));
    }
    let mut solver = QpSolver::new(opts.penalty)?;
    let mut x = plant.initial_state.clone();
    let mut obs = ObserverState::new(opts.observer, opts.dt, &x)?;
    let substeps = obs.substeps();
    let sample_period = opts.observer.sample_period;
    let enclosing = model.input_box.scaled(2.0);

    let mut rec = EpisodeRecord {
        min_h: plant.min_barrier(&x),
        ..EpisodeRecord::default()
    };
    if rec.min_h < 0.0 {
        rec.violation = true;
        rec.first_violation_time = Some(0.0);
    }
    let mut last_reward = 0.0;
    let timing = opts.timing;

    for step in 0..opts.steps {
        let t = step as f64 * sample_period;

        timed!(timing, rec.timing.observer, obs.pc_update(&x))?;
        let d_true = plant.disturbance.at(&x);
        let err = (&obs.d_hat - &d_true).norm();
        if step > 0 {
            rec.estimation.push(EstimationSample {
                step,
                abs_error: err,
                magnitude: d_true.norm(),
            });
        }

        let u_rl = match policy.act(t, &x, last_reward) {
            Ok(u) if u.len() == model.m => enclosing.clamp(&u),
            Ok(u) => {
                rec.abort = Some(format!("policy returned {} inputs, expected {}", u.len(), model.m));
                break;
            }
            Err(e) => {
                rec.abort = Some(format!("policy: {e}"));
                break;
            }
        };
        let u_clamped = model.input_box.clamp(&u_rl);

        let (u_safe, slack_used, delta) = match opts.filter {
            FilterMode::Off => (u_clamped.clone(), false, 0.0),
            FilterMode::DobCbf | FilterMode::NominalCbf => {
                let (d_hat, delta) = if opts.filter == FilterMode::DobCbf {
                    (obs.d_hat.clone(), opts.bound.delta_at_sample(step as u64))
                } else {
                    (DVector::zeros(model.n), 0.0)
                };
                let ineqs: Vec<AffineConstraint> = timed!(
                    timing,
                    rec.timing.assembly,
                    plant
                        .constraints
                        .iter()
                        .map(|c| c.assemble_constraint(&x, &d_hat, delta))
                        .collect()
                );
                let problem = QpProblem {
                    weight: opts.weight.clone(),
                    u_ref: u_rl.clone(),
                    ineqs,
                    bounds: model.input_box.clone(),
                };
                let sol = timed!(timing, rec.timing.qp, solver.solve(&problem));
                match sol.status {
                    QpStatus::Failed => {
                        rec.abort = Some(format!(
                            "QP failed at step {step}: {}",
                            sol.failure.unwrap_or_else(|| "unknown".into())
                        ));
                        break;
                    }
                    QpStatus::Relaxed => {
                        rec.relaxations.push(RelaxationEvent {
                            step,
                            t,
                            max_slack: sol.slacks.iter().copied().fold(0.0, f64::max),
                        });
                        (sol.u, true, delta)
                    }
                    QpStatus::Optimal => (sol.u, false, delta),
                }
            }
        };
        let filter_active = (&u_safe - &u_clamped).norm() > FILTER_ACTIVE_TOL;
        rec.filter_active_steps += filter_active as usize;

        let x_start = x.clone();
        let mut h_interval = f64::INFINITY;
        let mut failure = None;
        for sub in 0..substeps {
            let stepped = timed!(
                timing,
                rec.timing.plant,
                step_rk4_stages(model, &x, &u_safe, &plant.disturbance, opts.dt)
            );
            let (next, stages) = match stepped {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(format!("plant at step {step}: {e}"));
                    break;
                }
            };
            if let Err(e) = timed!(timing, rec.timing.observer, obs.predictor_step(model, &stages, &u_safe)) {
                failure = Some(format!("observer at step {step}: {e}"));
                break;
            }
            x = next;
            let t_sub = t + (sub + 1) as f64 * opts.dt;
            let h = plant.min_barrier(&x);
            h_interval = h_interval.min(h);
            if h < 0.0 && !rec.violation {
                rec.violation = true;
                rec.first_violation_time = Some(t_sub);
            }
            if !model.state_box.contains(&x, 0.0) {
                rec.left_state_box = true;
            }
            // The estimate is held over the interval, so the whole interval
            // (including its right end, a left limit) falls under the bound
            // of the sample that produced it.
            let e = (&obs.d_hat - plant.disturbance.at(&x)).norm();
            let bound = opts.bound.delta_at_sample(step as u64);
            if step == 0 {
                rec.max_error_first_interval = rec.max_error_first_interval.max(e);
            } else {
                rec.max_error_after_first_sample = rec.max_error_after_first_sample.max(e);
            }
            if opts.filter == FilterMode::DobCbf && e > bound {
                rec.bound_exceedances += 1;
            }
        }
        if let Some(reason) = failure {
            rec.abort = Some(reason);
            break;
        }
        rec.min_h = rec.min_h.min(h_interval);
        plant.rechart(&mut x, &mut obs.x_hat);

        let t_next = t + sample_period;
        let reward = plant.reward(&x, &u_safe, t_next);
        rec.total_reward += reward;
        last_reward = reward;
        if opts.record_transitions {
            rec.transitions.push(Transition {
                step,
                t,
                x: x_start.as_slice().to_vec(),
                u_rl: u_rl.as_slice().to_vec(),
                u_safe: u_safe.as_slice().to_vec(),
                x_next: x.as_slice().to_vec(),
                reward,
                filter_active,
                slack_used,
                h_min: h_interval,
                d_hat: obs.d_hat.as_slice().to_vec(),
                delta,
            });
        }
        rec.steps_completed += 1;
        rec.timing.steps += 1;
    }

    let t_end = rec.steps_completed as f64 * sample_period;
    if let Err(e) = policy.finish(t_end, &x, last_reward) {
        if rec.abort.is_none() {
            rec.abort = Some(format!("policy: {e}"));
        }
    }
    Ok(rec)
}

/// Writes one JSON object per transition, newline-delimited.
pub fn write_transitions_ndjson<W: Write>(mut out: W, episode: usize, transitions: &[Transition]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        episode: usize,
        #[serde(flatten)]
        transition: &'a Transition,
    }
    for tr in transitions {
        serde_json::to_writer(&mut out, &Line { episode, transition: tr })
            .map_err(|e| Error::Serialization(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io("<ndjson>", e))?;
    }
    Ok(())
}
