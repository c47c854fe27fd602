//! Disturbance observer: state predictor, piecewise-constant estimation law and
//! the precomputable estimation error bound.
//!
//! The predictor is
//!
//! ```text
//!     x̂' = f(x) + g(x)u + d̂ - a (x̂ - x)
//! ```
//!
//! and at every sampling instant `iT` the estimate is reset to
//! `d̂ = -a / (e^{aT} - 1) · (x̂ - x)` and held until the next instant.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    step_rk4_stages, ControlVector, DisturbanceFn, DisturbanceVector, StageStates, StateVector,
    SystemModel,
};
use crate::error::{check_dim, Error, Result};
use crate::par::{self, Execution};

/// Grid points per axis used when searching the state box for `max ‖f+gu‖`.
pub const DEFAULT_GRID_POINTS: usize = 33;
/// Cap on the total number of state-grid points; high-dimensional boxes get
/// fewer points per axis.
pub const GRID_POINT_BUDGET: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverConfig {
    /// Predictor gain `a > 0`.
    pub gain: f64,
    /// Estimation sampling time `T > 0`, seconds.
    pub sample_period: f64,
}

impl ObserverConfig {
    pub fn new(gain: f64, sample_period: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::param("observer gain", "must be finite and > 0"));
        }
        if !(sample_period > 0.0 && sample_period.is_finite()) {
            return Err(Error::param("sample period", "must be finite and > 0"));
        }
        Ok(Self { gain, sample_period })
    }

    /// `a / (e^{aT} - 1)`.
    pub fn estimation_gain(&self) -> f64 {
        self.gain / (self.gain * self.sample_period).exp_m1()
    }

    /// Number of integration steps per sampling period; `T` must be an
    /// integer multiple of `dt`.
    pub fn substeps(&self, dt: f64) -> Result<usize> {
        if dt.is_nan() || dt <= 0.0 {
            return Err(Error::param("dt", "must be > 0"));
        }
        let ratio = self.sample_period / dt;
        let rounded = ratio.round();
        if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::param(
                "sample period",
                format!("T = {} is not an integer multiple of dt = {dt}", self.sample_period),
            ));
        }
        Ok(rounded as usize)
    }
}

/// Running observer for one trajectory.
#[derive(Debug, Clone)]
pub struct ObserverState {
    pub x_hat: StateVector,
    pub d_hat: DisturbanceVector,
    /// Index of the most recent sampling instant at which `d̂` was reset.
    pub last_sample_index: u64,
    cfg: ObserverConfig,
    dt: f64,
    substeps: usize,
    steps: u64,
}

impl ObserverState {
    /// Starts with `x̂(0) = x(0)` and `d̂(0) = 0`.
    pub fn new(cfg: ObserverConfig, dt: f64, x0: &StateVector) -> Result<Self> {
        let substeps = cfg.substeps(dt)?;
        Ok(Self {
            x_hat: x0.clone(),
            d_hat: DVector::zeros(x0.len()),
            last_sample_index: 0,
            cfg,
            dt,
            substeps,
            steps: 0,
        })
    }

    pub fn config(&self) -> &ObserverConfig {
        &self.cfg
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Integration steps per sampling period.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Elapsed time, counted in whole integration steps.
    pub fn t(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn is_sample_instant(&self) -> bool {
        self.steps.is_multiple_of(self.substeps as u64)
    }

    /// `x̃ = x̂ - x`.
    pub fn prediction_error(&self, x: &StateVector) -> StateVector {
        &self.x_hat - x
    }

    /// Advances the predictor by one `dt` with `d̂` and `u` held. The measured
    /// state is supplied at the four RK4 stage nodes, which makes this step
    /// exactly the predictor half of an RK4 step of the joint plant/predictor
    /// system when the stages come from [`step_rk4_stages`].
    pub fn predictor_step(&mut self, model: &SystemModel, measured: &StageStates, u: &ControlVector) -> Result<()> {
        check_dim("predictor state", model.n, self.x_hat.len())?;
        check_dim("control", model.m, u.len())?;
        let a = self.cfg.gain;
        let dt = self.dt;
        let d_hat = &self.d_hat;
        let rhs = |stage: usize, xh: &DVector<f64>| {
            let x = &measured.0[stage];
            model.nominal(x, u) + d_hat - (xh - x) * a
        };
        let x0 = &self.x_hat;
        let k1 = rhs(0, x0);
        let k2 = rhs(1, &(x0 + &k1 * (0.5 * dt)));
        let k3 = rhs(2, &(x0 + &k2 * (0.5 * dt)));
        let k4 = rhs(3, &(x0 + &k3 * dt));
        let next = x0 + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
        self.steps += 1;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::ObserverDivergence { t: self.t() });
        }
        self.x_hat = next;
        Ok(())
    }

    /// Piecewise-constant law; must be called on the sampling grid.
    pub fn pc_update(&mut self, x: &StateVector) -> Result<()> {
        check_dim("state", self.x_hat.len(), x.len())?;
        if !self.is_sample_instant() {
            return Err(Error::Scheduling {
                t: self.t(),
                period: self.cfg.sample_period,
            });
        }
        self.d_hat = (&self.x_hat - x) * (-self.cfg.estimation_gain());
        self.last_sample_index = self.steps / self.substeps as u64;
        Ok(())
    }
}

/// Advances plant and predictor together by one `dt` (RK4, `u` held), returning
/// the new plant state. Does not apply the estimation law.
pub fn advance(
    model: &SystemModel,
    d_fn: &DisturbanceFn,
    x: &StateVector,
    observer: &mut ObserverState,
    u: &ControlVector,
) -> Result<StateVector> {
    let (next, stages) = step_rk4_stages(model, x, u, d_fn, observer.dt())?;
    observer.predictor_step(model, &stages, u)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// Closed-form worst-case bound from the Lipschitz data.
    #[default]
    Theoretical,
    /// Safety factor times the largest error seen on a calibration suite.
    Empirical,
}

/// `δ(t)`: `theta` on `[0, T)` and `gamma` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub theta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub sample_period: f64,
    pub mode: BoundMode,
}

impl ErrorBound {
    /// Bound derived from observed errors: `factor × max` on each branch.
    pub fn empirical(max_first_interval: f64, max_after: f64, factor: f64, sample_period: f64) -> Self {
        Self {
            theta: factor * max_first_interval,
            eta: 0.0,
            gamma: factor * max_after,
            sample_period,
            mode: BoundMode::Empirical,
        }
    }

    pub fn delta(&self, t: f64) -> f64 {
        if t < self.sample_period * (1.0 - 1e-9) {
            self.theta
        } else {
            self.gamma
        }
    }

    /// `δ` at a sampling instant; the first interval is index 0.
    pub fn delta_at_sample(&self, index: u64) -> f64 {
        if index == 0 {
            self.theta
        } else {
            self.gamma
        }
    }

    /// `max_t δ(t)`.
    pub fn delta_max(&self) -> f64 {
        self.theta.max(self.gamma)
    }
}

/// `γ(T) = 2√n η T + √n (1 - e^{-aT}) θ`.
pub fn gamma_of(n: usize, eta: f64, theta: f64, gain: f64, period: f64) -> f64 {
    let rn = (n as f64).sqrt();
    2.0 * rn * eta * period + rn * (-(-gain * period).exp_m1()) * theta
}

/// Worst-case estimation error bound.
///
/// `max ‖x‖` over the state box is attained at a vertex. `max ‖f + gu‖` is
/// convex in `u`, so `u` ranges over the input-box vertices, while `x` ranges
/// over a uniform grid (vertices included) of the state box.
pub fn compute_error_bound(model: &SystemModel, cfg: &ObserverConfig, grid_points: usize) -> Result<ErrorBound> {
    let l_d = model.lipschitz_const;
    let theta = l_d * model.state_box.max_norm() + model.origin_bound;
    let max_nominal = if l_d == 0.0 {
        0.0
    } else {
        max_nominal_speed(model, grid_points, Execution::Parallel)?
    };
    let eta = l_d * (max_nominal + theta);
    let gamma = gamma_of(model.n, eta, theta, cfg.gain, cfg.sample_period);
    if !(theta.is_finite() && eta.is_finite() && gamma.is_finite()) {
        return Err(Error::BoundComputation("non-finite bound".into()));
    }
    Ok(ErrorBound {
        theta,
        eta,
        gamma,
        sample_period: cfg.sample_period,
        mode: BoundMode::Theoretical,
    })
}

/// Points per axis after applying [`GRID_POINT_BUDGET`].
pub fn effective_grid_points(n: usize, requested: usize) -> usize {
    let mut p = requested.max(2);
    while p > 2 && (p as f64).powi(n as i32) > GRID_POINT_BUDGET as f64 {
        p -= 1;
    }
    p
}

/// `max_{x∈X, u∈U} ‖f(x) + g(x)u‖` by grid search.
pub fn max_nominal_speed(model: &SystemModel, grid_points: usize, exec: Execution) -> Result<f64> {
    let p = effective_grid_points(model.n, grid_points);
    let total = p.pow(model.n as u32);
    let vertices: Vec<_> = model.input_box.vertices().collect();
    const CHUNK: usize = 1024;
    let chunks = total.div_ceil(CHUNK);
    let partial = par::map_indexed(exec, chunks, |c| -> Result<f64> {
        let mut best: f64 = 0.0;
        for idx in c * CHUNK..((c + 1) * CHUNK).min(total) {
            let x = model.state_box.grid_point(p, idx);
            let f = (model.drift)(&x);
            let g = (model.input_matrix)(&x);
            for u in &vertices {
                let v = (&f + &g * u).norm();
                if !v.is_finite() {
                    return Err(Error::BoundComputation(format!(
                        "non-finite f(x) + g(x)u at x = {:?}",
                        x.as_slice()
                    )));
                }
                best = best.max(v);
            }
        }
        Ok(best)
    });
    partial.into_iter().try_fold(0.0f64, |acc, r| r.map(|v| acc.max(v)))
}

/// Settings for [`certify_bound`].
#[derive(Debug, Clone)]
pub struct CertifyOptions {
    pub horizon: f64,
    pub trials: usize,
    pub seed: u64,
    /// Integration step; defaults to `T / 10`.
    pub dt: Option<f64>,
    /// Random inputs are redrawn every `input_hold` seconds.
    pub input_hold: f64,
    /// Initial states are drawn from the state box scaled by this factor.
    pub start_scale: f64,
    pub grid_points: usize,
    pub exec: Execution,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            trials: 4,
            seed: 0,
            dt: None,
            input_hold: 0.05,
            start_scale: 0.3,
            grid_points: DEFAULT_GRID_POINTS,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationReport {
    pub bound: ErrorBound,
    pub trials: usize,
    /// Trials stopped early because the state left the state box.
    pub truncated_trials: usize,
    pub steps_checked: u64,
    /// Steps where `‖d̂ - d(x)‖ > δ(t)`.
    pub violations: u64,
    pub violation_fraction: f64,
    pub max_error_first_interval: f64,
    /// `max_{t >= T} ‖d̂(t) - d(x(t))‖`.
    pub max_error_after_first_sample: f64,
}

struct TrialOutcome {
    truncated: bool,
    steps: u64,
    violations: u64,
    max_first: f64,
    max_after: f64,
}

/// Simulates the plant under random admissible inputs and audits the observer
/// against the bound at every integration step.
pub fn certify_bound(
    model: &SystemModel,
    cfg: &ObserverConfig,
    d_fn: &DisturbanceFn,
    opts: &CertifyOptions,
) -> Result<CertificationReport> {
    let bound = compute_error_bound(model, cfg, opts.grid_points)?;
    certify_against(model, cfg, d_fn, &bound, opts)
}

/// Like [`certify_bound`] but against a caller-supplied bound.
pub fn certify_against(
    model: &SystemModel,
    cfg: &ObserverConfig,
    d_fn: &DisturbanceFn,
    bound: &ErrorBound,
    opts: &CertifyOptions,
) -> Result<CertificationReport> {
    let dt = opts.dt.unwrap_or(cfg.sample_period / 10.0);
    cfg.substeps(dt)?;
    let total_steps = (opts.horizon / dt).round() as u64;
    let hold_steps = ((opts.input_hold / dt).round() as u64).max(1);
    let start_box = model.state_box.scaled(opts.start_scale);

    let outcomes = par::map_indexed(opts.exec, opts.trials, |trial| -> Result<TrialOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(trial as u64 + 1);
        let mut x = start_box.sample(&mut rng);
        let mut obs = ObserverState::new(*cfg, dt, &x)?;
        let mut out = TrialOutcome {
            truncated: false,
            steps: 0,
            violations: 0,
            max_first: 0.0,
            max_after: 0.0,
        };
        let mut u = model.input_box.sample(&mut rng);
        for step in 0..=total_steps {
            if obs.is_sample_instant() {
                obs.pc_update(&x)?;
            }
            if !model.state_box.contains(&x, 0.0) {
                out.truncated = true;
                break;
            }
            let t = obs.t();
            let err = (&obs.d_hat - d_fn.at(&x)).norm();
            out.steps += 1;
            if err > bound.delta(t) {
                out.violations += 1;
            }
            if t < cfg.sample_period * (1.0 - 1e-9) {
                out.max_first = out.max_first.max(err);
            } else {
                out.max_after = out.max_after.max(err);
            }
            if step == total_steps {
                break;
            }
            if step > 0 && step % hold_steps == 0 {
                u = model.input_box.sample(&mut rng);
            }
            x = advance(model, d_fn, &x, &mut obs, &u)?;
        }
        Ok(out)
    });

    let mut report = CertificationReport {
        bound: *bound,
        trials: opts.trials,
        truncated_trials: 0,
        steps_checked: 0,
        violations: 0,
        violation_fraction: 0.0,
        max_error_first_interval: 0.0,
        max_error_after_first_sample: 0.0,
    };
    for o in outcomes {
        let o = o?;
        report.truncated_trials += o.truncated as usize;
        report.steps_checked += o.steps;
        report.violations += o.violations;
        report.max_error_first_interval = report.max_error_first_interval.max(o.max_first);
        report.max_error_after_first_sample = report.max_error_after_first_sample.max(o.max_after);
    }
    if report.steps_checked > 0 {
        report.violation_fraction = report.violations as f64 / report.steps_checked as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DMatrix;

    use crate::dynamics::BoxSet;

    use super::*;

    fn still_model(n: usize) -> SystemModel {
        SystemModel::new(
            Arc::new(move |_: &StateVector| DVector::zeros(n)),
            Arc::new(move |_: &StateVector| DMatrix::zeros(n, 1)),
            BoxSet::symmetric(&vec![1.0; n]).unwrap(),
            BoxSet::symmetric(&[1.0]).unwrap(),
            0.0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ObserverConfig::new(0.0, 0.1).is_err());
        assert!(ObserverConfig::new(1.0, -0.1).is_err());
        let cfg = ObserverConfig::new(1.0, 0.01).unwrap();
        assert_eq!(cfg.substeps(0.001).unwrap(), 10);
        assert!(cfg.substeps(0.003).is_err());
    }

    #[test]
    fn matched_predictor_stays_on_state() {
        let model = still_model(1);
        let cfg = ObserverConfig::new(5.0, 0.01).unwrap();
        let x = DVector::from_element(1, 0.3);
        let mut obs = ObserverState::new(cfg, 0.001, &x).unwrap();
        let u = DVector::zeros(1);
        for _ in 0..1000 {
            obs.predictor_step(&model, &StageStates::held(&x), &u).unwrap();
        }
        assert_eq!(obs.prediction_error(&x)[0], 0.0);
    }

    #[test]
    fn prediction_error_closed_form_under_constant_disturbance() {
        // x' = c, x̂' = -a (x̂ - x) with d̂ = 0: x̃(t) = -(c/a)(1 - e^{-at}).
        let (a, c) = (4.0, 0.7);
        let model = still_model(1);
        let cfg = ObserverConfig::new(a, 1.0).unwrap();
        let dt = 1e-3;
        let d = DisturbanceFn::constant(DVector::from_element(1, c));
        let mut x = DVector::zeros(1);
        let mut obs = ObserverState::new(cfg, dt, &x).unwrap();
        let u = DVector::zeros(1);
        for _ in 0..900 {
            x = advance(&model, &d, &x, &mut obs, &u).unwrap();
        }
        let t = obs.t();
        let expected = -(c / a) * (1.0 - (-a * t).exp());
        assert!((obs.prediction_error(&x)[0] - expected).abs() < 1e-6);

        // The first-order-hold form agrees on this linear measured trajectory.
        let mut obs2 = ObserverState::new(cfg, dt, &DVector::zeros(1)).unwrap();
        for k in 0..900 {
            let x0 = DVector::from_element(1, c * k as f64 * dt);
            let x1 = DVector::from_element(1, c * (k + 1) as f64 * dt);
            obs2.predictor_step(&model, &StageStates::linear(&x0, &x1), &u).unwrap();
        }
        assert!((obs2.prediction_error(&x)[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn high_gain_error_contracts() {
        // |x̃(t)| <= |x̃(0)| e^{-at} + |d̂ - d| / a.
        let a = 1e3;
        let model = still_model(1);
        let cfg = ObserverConfig::new(a, 1.0).unwrap();
        let dt = 1e-4;
        let x = DVector::zeros(1);
        let mut obs = ObserverState::new(cfg, dt, &x).unwrap();
        obs.x_hat[0] = 2.0;
        obs.d_hat[0] = 0.8;
        let u = DVector::zeros(1);
        for _ in 0..100 {
            obs.predictor_step(&model, &StageStates::held(&x), &u).unwrap();
        }
        let bound = 2.0 * (-10.0f64).exp() + 0.8 / a;
        assert!(obs.prediction_error(&x)[0].abs() <= bound);
    }

    #[test]
    fn pc_law_values() {
        let model = still_model(1);
        let cfg = ObserverConfig::new(1.0, std::f64::consts::LN_2).unwrap();
        let x = DVector::zeros(1);
        let mut obs = ObserverState::new(cfg, cfg.sample_period, &x).unwrap();
        obs.pc_update(&x).unwrap();
        assert_eq!(obs.d_hat[0], 0.0);
        obs.predictor_step(&model, &StageStates::held(&x), &DVector::zeros(1)).unwrap();
        obs.x_hat[0] = 0.5;
        obs.pc_update(&x).unwrap();
        assert!((obs.d_hat[0] + 0.5).abs() < 1e-12);
        assert_eq!(obs.last_sample_index, 1);
    }

    #[test]
    fn pc_update_off_grid_is_rejected() {
        let model = still_model(1);
        let cfg = ObserverConfig::new(1.0, 0.01).unwrap();
        let x = DVector::zeros(1);
        let mut obs = ObserverState::new(cfg, 0.001, &x).unwrap();
        obs.predictor_step(&model, &StageStates::held(&x), &DVector::zeros(1)).unwrap();
        assert!(matches!(obs.pc_update(&x), Err(Error::Scheduling { .. })));
    }

    #[test]
    fn constant_disturbance_is_tracked_within_gamma() {
        let (a, period, c) = (2.0, 0.01, 0.6);
        let model = still_model(1).with_disturbance_bounds(0.0, c);
        let cfg = ObserverConfig::new(a, period).unwrap();
        let bound = compute_error_bound(&model, &cfg, 5).unwrap();
        let d = DisturbanceFn::constant(DVector::from_element(1, c));
        let mut x = DVector::zeros(1);
        let mut obs = ObserverState::new(cfg, period / 10.0, &x).unwrap();
        let u = DVector::zeros(1);
        for _ in 0..2 {
            obs.pc_update(&x).unwrap();
            for _ in 0..10 {
                x = advance(&model, &d, &x, &mut obs, &u).unwrap();
            }
        }
        obs.pc_update(&x).unwrap();
        assert_eq!(obs.last_sample_index, 2);
        // The constant case meets the bound with equality, up to rounding.
        assert!((obs.d_hat[0] - c).abs() <= bound.gamma + 1e-12);
        // Steady state is e^{-aT} c.
        assert!((obs.d_hat[0] - c * (-a * period).exp()).abs() < 1e-9);
    }

    #[test]
    fn bound_formula_values() {
        let zero = still_model(1);
        let cfg = ObserverConfig::new(1.0, 0.01).unwrap();
        let b = compute_error_bound(&zero, &cfg, 9).unwrap();
        assert_eq!((b.theta, b.eta, b.gamma), (0.0, 0.0, 0.0));

        let model = still_model(1).with_disturbance_bounds(1.0, 1.0);
        let b = compute_error_bound(&model, &cfg, 9).unwrap();
        assert_eq!(b.theta, 2.0);
        assert_eq!(b.eta, 2.0);
        let expected = 2.0 * 2.0 * 0.01 + (1.0 - (-0.01f64).exp()) * 2.0;
        assert!((b.gamma - expected).abs() < 1e-15);
        assert!((b.gamma - 0.0599).abs() < 1e-4);
        assert_eq!(b.delta(0.0), 2.0);
        assert_eq!(b.delta(0.005), 2.0);
        assert_eq!(b.delta(0.01), b.gamma);
    }

    #[test]
    fn gamma_shrinks_with_period() {
        let mut prev = f64::INFINITY;
        for period in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
            let g = gamma_of(3, 2.0, 1.5, 10.0, period);
            assert!(g < prev);
            assert!(g > 0.0);
            prev = g;
        }
        assert!(gamma_of(3, 2.0, 1.5, 10.0, 0.005) < gamma_of(3, 2.0, 1.5, 10.0, 0.01));
    }

    #[test]
    fn unbounded_callbacks_fail_bound_computation() {
        let model = SystemModel::new(
            Arc::new(|x: &StateVector| x.map(|v| 1.0 / v)),
            Arc::new(|_: &StateVector| DMatrix::zeros(1, 1)),
            BoxSet::symmetric(&[1.0]).unwrap(),
            BoxSet::symmetric(&[1.0]).unwrap(),
            1.0,
            0.0,
        )
        .unwrap();
        let cfg = ObserverConfig::new(1.0, 0.01).unwrap();
        assert!(matches!(compute_error_bound(&model, &cfg, 3), Err(Error::BoundComputation(_))));
    }

    #[test]
    fn zero_disturbance_certifies_exactly() {
        let model = SystemModel::new(
            Arc::new(|x: &StateVector| -x),
            Arc::new(|_: &StateVector| DMatrix::from_element(1, 1, 1.0)),
            BoxSet::symmetric(&[3.0]).unwrap(),
            BoxSet::symmetric(&[1.0]).unwrap(),
            0.0,
            0.0,
        )
        .unwrap();
        let cfg = ObserverConfig::new(10.0, 0.01).unwrap();
        let report = certify_bound(&model, &cfg, &DisturbanceFn::zero(1), &CertifyOptions::default()).unwrap();
        assert_eq!(report.violations, 0);
        assert!(report.max_error_after_first_sample < 1e-12);
        assert!(report.steps_checked > 0);
    }
}
