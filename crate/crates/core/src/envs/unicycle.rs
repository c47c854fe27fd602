//! Unicycle on slippery ground with circular obstacles.
//!
//! ```text
//!     ṗ_x = cos θ (v + d_m),   ṗ_y = sin θ (v + d_m),   θ̇ = ω
//! ```

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{BoxSet, DisturbanceFn, StateVector, SystemModel};
use crate::error::{Error, Result};
use crate::hocbf::{ClassKappa, ConstraintSpec, KappaKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// `d_m(x) = base · (1 + ripple · sin p_x)`. A negative base is a loss of
/// traction: the wheels deliver less forward speed than commanded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlipProfile {
    pub base: f64,
    pub ripple: f64,
}

impl SlipProfile {
    pub fn eval(&self, px: f64) -> f64 {
        self.base * (1.0 + self.ripple * px.sin())
    }

    /// `d = d_m (cos θ, sin θ, 0)`. Its Jacobian has orthogonal columns
    /// `d_m'(p_x)(cos θ, sin θ, 0)` and `d_m (-sin θ, cos θ, 0)`, so the
    /// spectral norm is at most `|base|(1 + |ripple|)`.
    pub fn lipschitz(&self) -> f64 {
        self.base.abs() * (1.0 + self.ripple.abs())
    }

    pub fn origin_bound(&self) -> f64 {
        self.base.abs()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base: self.base * factor,
            ripple: self.ripple,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnicycleTrackerGains {
    /// `v = min(kv · distance, v_max)`.
    pub kv: f64,
    /// `ω = kw · wrap(bearing - θ)`.
    pub kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnicycleParams {
    pub start: [f64; 2],
    /// Initial heading; `None` faces the goal.
    pub start_heading: Option<f64>,
    pub goal: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    pub v_range: [f64; 2],
    pub omega_range: [f64; 2],
    pub slip: SlipProfile,
    pub beta: ClassKappa,
    /// Position half-width of the state box.
    pub workspace: f64,
    /// Heading half-width of the state box.
    pub heading_bound: f64,
    pub tracker: UnicycleTrackerGains,
    pub control_weight: f64,
}

impl Default for UnicycleParams {
    fn default() -> Self {
        Self {
            start: [-2.5, -2.5],
            start_heading: None,
            goal: [2.5, 2.5],
            obstacles: vec![
                Obstacle { center: [0.0, 0.0], radius: 0.5 },
                Obstacle { center: [-1.2, 1.0], radius: 0.4 },
                Obstacle { center: [1.1, -1.3], radius: 0.3 },
            ],
            v_range: [0.0, 2.0],
            omega_range: [-PI, PI],
            slip: SlipProfile { base: -0.3, ripple: 0.5 },
            beta: ClassKappa { kind: KappaKind::Linear, gain: 5.0 },
            workspace: 3.0,
            heading_bound: 2.0 * PI,
            tracker: UnicycleTrackerGains { kv: 1.0, kw: 3.0 },
            control_weight: 1e-3,
        }
    }
}

impl UnicycleParams {
    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.obstacles.iter().enumerate() {
            if o.radius.is_nan() || o.radius <= 0.0 {
                return Err(Error::param("obstacle radius", format!("obstacle {i} has radius {}", o.radius)));
            }
            for (what, p) in [("start", self.start), ("goal", self.goal)] {
                let dist = ((p[0] - o.center[0]).powi(2) + (p[1] - o.center[1]).powi(2)).sqrt();
                if dist <= o.radius {
                    return Err(Error::param("obstacles", format!("obstacle {i} contains the {what}")));
                }
            }
        }
        if !(self.v_range[0] <= self.v_range[1] && self.omega_range[0] <= self.omega_range[1]) {
            return Err(Error::param("input ranges", "lower bound above upper bound"));
        }
        if !(self.workspace > 0.0 && self.heading_bound > 0.0) {
            return Err(Error::param("state box", "half-widths must be > 0"));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> StateVector {
        let heading = self
            .start_heading
            .unwrap_or_else(|| (self.goal[1] - self.start[1]).atan2(self.goal[0] - self.start[0]));
        DVector::from_vec(vec![self.start[0], self.start[1], heading])
    }

    pub fn model(&self) -> Result<SystemModel> {
        self.validate()?;
        let w = self.workspace;
        SystemModel::new(
            Arc::new(|_: &StateVector| DVector::zeros(3)),
            Arc::new(|x: &StateVector| {
                let (s, c) = x[2].sin_cos();
                DMatrix::from_row_slice(3, 2, &[c, 0.0, s, 0.0, 0.0, 1.0])
            }),
            BoxSet::new(vec![-w, -w, -self.heading_bound], vec![w, w, self.heading_bound])?,
            BoxSet::new(
                vec![self.v_range[0], self.omega_range[0]],
                vec![self.v_range[1], self.omega_range[1]],
            )?,
            self.slip.lipschitz(),
            self.slip.origin_bound(),
        )
    }

    pub fn disturbance(&self) -> DisturbanceFn {
        let slip = self.slip;
        DisturbanceFn::new(
            Arc::new(move |x: &StateVector| {
                let dm = slip.eval(x[0]);
                let (s, c) = x[2].sin_cos();
                DVector::from_vec(vec![c * dm, s * dm, 0.0])
            }),
            slip.lipschitz(),
            slip.origin_bound(),
        )
    }

    /// One relative-degree-one barrier per obstacle,
    /// `h = ½(‖p - c‖² - r²)`, with `L_f h = 0`, `L_g h = ((p-c)·(cos θ, sin θ), 0)`
    /// and `h_x = (p - c, 0)`.
    pub fn constraints(&self) -> Vec<ConstraintSpec> {
        self.obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let (cx, cy, r) = (o.center[0], o.center[1], o.radius);
                ConstraintSpec::relative_degree_one(
                    format!("obstacle_{i}"),
                    Arc::new(move |x: &StateVector| 0.5 * ((x[0] - cx).powi(2) + (x[1] - cy).powi(2) - r * r)),
                    Arc::new(|_: &StateVector| 0.0),
                    Arc::new(move |x: &StateVector| {
                        let (s, c) = x[2].sin_cos();
                        DVector::from_vec(vec![(x[0] - cx) * c + (x[1] - cy) * s, 0.0])
                    }),
                    Arc::new(move |x: &StateVector| DVector::from_vec(vec![x[0] - cx, x[1] - cy, 0.0])),
                    self.beta,
                )
            })
            .collect()
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::eval_dynamics;

    fn one_obstacle(r: f64) -> UnicycleParams {
        UnicycleParams {
            obstacles: vec![Obstacle { center: [0.0, 0.0], radius: r }],
            ..UnicycleParams::default()
        }
    }

    #[test]
    fn hand_evaluated_dynamics() {
        let p = UnicycleParams::default();
        let model = p.model().unwrap();
        let xdot = eval_dynamics(
            &model,
            &DVector::from_vec(vec![0.0, 0.0, 0.0]),
            &DVector::from_vec(vec![1.0, 0.0]),
            &DVector::zeros(3),
        )
        .unwrap();
        assert_eq!(xdot.as_slice(), &[1.0, 0.0, 0.0]);

        // θ = π/2 and d_m = 0.5 adds to v along the heading.
        let x = DVector::from_vec(vec![0.0, 0.0, PI / 2.0]);
        let d = DVector::from_vec(vec![(PI / 2.0).cos() * 0.5, 0.5, 0.0]);
        let xdot = eval_dynamics(&model, &x, &DVector::from_vec(vec![1.0, 0.0]), &d).unwrap();
        assert!(xdot[0].abs() < 1e-15);
        assert!((xdot[1] - 1.5).abs() < 1e-15);
        assert_eq!(xdot[2], 0.0);
    }

    #[test]
    fn barrier_values() {
        let p = one_obstacle(0.5);
        let spec = &p.constraints()[0];
        let x = DVector::from_vec(vec![1.0, 0.0, PI]);
        assert!(((spec.h)(&x) - 0.375).abs() < 1e-15);
        // ḣ = h_x · ṗ with v = 1 heading back toward the obstacle.
        let lg = (spec.lie_g_lie_f)(&x);
        assert!((lg[0] + 1.0).abs() < 1e-15);
        let outside = DVector::from_vec(vec![1.5, 0.0, 0.0]);
        assert!((spec.h)(&outside) > 0.0);
    }

    #[test]
    fn far_from_obstacles_worst_case_holds() {
        let p = UnicycleParams::default();
        let model = p.model().unwrap();
        let x = DVector::from_vec(vec![2.5, -2.5, 0.0]);
        for spec in p.constraints() {
            assert!(spec.check_worst_case(&x, 0.3, 0.15, &model.input_box));
        }
    }

    #[test]
    fn declared_disturbance_constants() {
        let p = UnicycleParams::default();
        let d = p.disturbance();
        assert!((d.declared_lipschitz - 0.45).abs() < 1e-15);
        assert!((d.at(&DVector::zeros(3)).norm() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rejects_obstacle_on_start() {
        let mut p = UnicycleParams::default();
        p.obstacles.push(Obstacle { center: p.start, radius: 0.1 });
        assert!(p.model().is_err());
    }

    #[test]
    fn wrap_angle_range() {
        for k in -5..=5 {
            let a = 0.3 + 2.0 * PI * k as f64;
            assert!((wrap_angle(a) - 0.3).abs() < 1e-12);
        }
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
    }
}
