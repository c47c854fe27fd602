//! Planar quadrotor inside a circular boundary.
//!
//! State `(p_x, v_x, p_z, v_z, θ, θ̇)`, inputs the two rotor thrusts:
//!
//! ```text
//!     v̇_x = -sin θ (u1 + u2 + d_u1 + d_u2) / m + d_x
//!     v̇_z =  cos θ (u1 + u2 + d_u1 + d_u2) / m - g + d_z
//!     θ̈   = (u2 - u1 - d_u1 + d_u2) L / I_yy
//! ```

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{BoxSet, DisturbanceFn, StateVector, SystemModel};
use crate::error::{Error, Result};
use crate::hocbf::{ClassKappa, ConstraintSpec, KappaKind};

/// `p(t) = R (cos Ωt, sin Ωt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleReference {
    pub radius: f64,
    pub rate: f64,
}

impl CircleReference {
    pub fn position(&self, t: f64) -> [f64; 2] {
        let (s, c) = (self.rate * t).sin_cos();
        [self.radius * c, self.radius * s]
    }

    pub fn velocity(&self, t: f64) -> [f64; 2] {
        let (s, c) = (self.rate * t).sin_cos();
        let w = self.radius * self.rate;
        [-w * s, w * c]
    }

    pub fn acceleration(&self, t: f64) -> [f64; 2] {
        let p = self.position(t);
        let w2 = self.rate * self.rate;
        [-w2 * p[0], -w2 * p[1]]
    }
}

/// Rotor friction and air resistance:
///
/// ```text
///     d_u1 = -c0 (1 + c1 sin p_x) - c2 cos p_z
///     d_u2 = -c0 (1 + c1 sin p_x) + c2 cos p_z
///     d_x  = wind_x - drag v_x,   d_z = wind_z - drag v_z
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadDisturbance {
    pub rotor_base: f64,
    pub rotor_ripple: f64,
    pub rotor_skew: f64,
    pub wind: [f64; 2],
    pub drag: f64,
}

impl QuadDisturbance {
    pub fn none() -> Self {
        Self {
            rotor_base: 0.0,
            rotor_ripple: 0.0,
            rotor_skew: 0.0,
            wind: [0.0, 0.0],
            drag: 0.0,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rotor_base: self.rotor_base * factor,
            rotor_ripple: self.rotor_ripple,
            rotor_skew: self.rotor_skew * factor,
            wind: [self.wind[0] * factor, self.wind[1] * factor],
            drag: self.drag * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadTrackerGains {
    pub kp: f64,
    pub kd: f64,
    pub k_attitude: f64,
    pub k_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub arm: f64,
    pub inertia_yy: f64,
    pub gravity: f64,
    pub u_max: f64,
    pub r_bnd: f64,
    pub reference: CircleReference,
    pub disturbance: QuadDisturbance,
    pub beta1: ClassKappa,
    pub beta2: ClassKappa,
    pub position_bound: f64,
    pub velocity_bound: f64,
    pub angle_bound: f64,
    pub rate_bound: f64,
    pub tracker: QuadTrackerGains,
    pub control_weight: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 0.032,
            arm: 0.04,
            inertia_yy: 2.4e-5,
            gravity: 9.81,
            u_max: 2.0,
            r_bnd: 0.85,
            reference: CircleReference { radius: 0.7, rate: 1.0 },
            disturbance: QuadDisturbance {
                rotor_base: 0.006,
                rotor_ripple: 0.2,
                rotor_skew: 5e-5,
                wind: [0.4, -0.2],
                drag: 0.1,
            },
            beta1: ClassKappa { kind: KappaKind::Linear, gain: 5.0 },
            beta2: ClassKappa { kind: KappaKind::Linear, gain: 5.0 },
            position_bound: 1.5,
            velocity_bound: 5.0,
            angle_bound: FRAC_PI_2,
            rate_bound: 30.0,
            tracker: QuadTrackerGains {
                kp: 16.0,
                kd: 8.0,
                k_attitude: 900.0,
                k_rate: 60.0,
            },
            control_weight: 1e-3,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mass", self.mass),
            ("arm", self.arm),
            ("inertia_yy", self.inertia_yy),
            ("u_max", self.u_max),
            ("r_bnd", self.r_bnd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be finite and > 0"));
            }
        }
        if self.reference.radius >= self.r_bnd {
            return Err(Error::param("reference", "circle must lie inside the boundary"));
        }
        Ok(())
    }

    pub fn hover_thrust(&self) -> f64 {
        0.5 * self.mass * self.gravity
    }

    /// On the reference at `t = 0`, at rest in attitude.
    pub fn initial_state(&self) -> StateVector {
        let p = self.reference.position(0.0);
        let v = self.reference.velocity(0.0);
        DVector::from_vec(vec![p[0], v[0], p[1], v[1], 0.0, 0.0])
    }

    pub fn model(&self) -> Result<SystemModel> {
        self.validate()?;
        let (m, g, arm_over_i) = (self.mass, self.gravity, self.arm / self.inertia_yy);
        let (pb, vb, ab, rb) = (self.position_bound, self.velocity_bound, self.angle_bound, self.rate_bound);
        let dist = self.disturbance_fn();
        SystemModel::new(
            Arc::new(move |x: &StateVector| DVector::from_vec(vec![x[1], 0.0, x[3], -g, x[5], 0.0])),
            Arc::new(move |x: &StateVector| {
                let (s, c) = x[4].sin_cos();
                let mut gm = DMatrix::zeros(6, 2);
                for j in 0..2 {
                    gm[(1, j)] = -s / m;
                    gm[(3, j)] = c / m;
                }
                gm[(5, 0)] = -arm_over_i;
                gm[(5, 1)] = arm_over_i;
                gm
            }),
            BoxSet::new(vec![-pb, -vb, -pb, -vb, -ab, -rb], vec![pb, vb, pb, vb, ab, rb])?,
            BoxSet::new(vec![0.0, 0.0], vec![self.u_max, self.u_max])?,
            dist.declared_lipschitz,
            dist.declared_origin_bound,
        )
    }

    /// Lumped disturbance in the `v̇_x`, `v̇_z` and `θ̈` rows.
    ///
    /// Its Jacobian entries are bounded by `A = 2 c0 (1 + c1) / m` (attitude),
    /// `B = 2 c0 c1 / m` (position ripple), `drag` (velocity, two rows) and
    /// `C = 2 c2 L / I` (skew), so the Frobenius norm gives
    /// `l_d = sqrt(A² + B² + 2 drag² + C²)`.
    pub fn disturbance_fn(&self) -> DisturbanceFn {
        let q = self.disturbance;
        let (m, arm_over_i) = (self.mass, self.arm / self.inertia_yy);
        let a = 2.0 * q.rotor_base.abs() * (1.0 + q.rotor_ripple.abs()) / m;
        let b = 2.0 * q.rotor_base.abs() * q.rotor_ripple.abs() / m;
        let c = 2.0 * q.rotor_skew.abs() * arm_over_i;
        let l_d = (a * a + b * b + 2.0 * q.drag * q.drag + c * c).sqrt();
        let eval = move |x: &StateVector| {
            let rotor = -q.rotor_base * (1.0 + q.rotor_ripple * x[0].sin());
            let skew = q.rotor_skew * x[2].cos();
            let (du1, du2) = (rotor - skew, rotor + skew);
            let (s, c) = x[4].sin_cos();
            let sum = du1 + du2;
            DVector::from_vec(vec![
                0.0,
                -s * sum / m + q.wind[0] - q.drag * x[1],
                0.0,
                c * sum / m + q.wind[1] - q.drag * x[3],
                0.0,
                (du2 - du1) * arm_over_i,
            ])
        };
        let b_d = eval(&DVector::zeros(6)).norm();
        DisturbanceFn::new(Arc::new(eval), l_d, b_d)
    }

    /// Boundary barrier `h = ½(r² - p_x² - p_z²)`, relative degree two.
    ///
    /// ```text
    ///     L_f h      = -(p_x v_x + p_z v_z)
    ///     L_f² h     = -v_x² - v_z² + g p_z
    ///     L_g L_f h  = (p_x sin θ - p_z cos θ) / m   (both rotors)
    ///     [L_f h]_x  = (-v_x, -p_x, -v_z, -p_z, 0, 0)
    /// ```
    pub fn constraint(&self) -> ConstraintSpec {
        let (r, m, g) = (self.r_bnd, self.mass, self.gravity);
        ConstraintSpec::relative_degree_two(
            "boundary",
            Arc::new(move |x: &StateVector| 0.5 * (r * r - x[0] * x[0] - x[2] * x[2])),
            Arc::new(|x: &StateVector| -(x[0] * x[1] + x[2] * x[3])),
            Arc::new(move |x: &StateVector| -x[1] * x[1] - x[3] * x[3] + g * x[2]),
            Arc::new(move |x: &StateVector| {
                let (s, c) = x[4].sin_cos();
                let v = (x[0] * s - x[2] * c) / m;
                DVector::from_vec(vec![v, v])
            }),
            Arc::new(|x: &StateVector| DVector::from_vec(vec![-x[1], -x[0], -x[3], -x[2], 0.0, 0.0])),
            self.beta1,
            self.beta2,
        )
    }
}
