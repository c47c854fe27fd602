//! High-order control barrier functions under an estimated disturbance.
//!
//! For a barrier `h` of input relative degree `m` the safe-action condition is
//!
//! ```text
//!     L_f^m h + L_g L_f^{m-1} h · u + O(h) + [L_f^{m-1} h]_x · d̂ - ‖[L_f^{m-1} h]_x‖ δ
//!         + β_m(φ_{m-1}) >= 0
//! ```
//!
//! which is affine in `u`; [`ConstraintSpec::assemble_constraint`] returns it
//! as `coeff · u >= rhs`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{BoxSet, ControlVector, DisturbanceVector, StateVector};
use crate::error::{Error, Result};

pub type ScalarField = Arc<dyn Fn(&StateVector) -> f64 + Send + Sync>;
/// Row-vector valued callback, stored as a column `DVector`.
pub type RowField = Arc<dyn Fn(&StateVector) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KappaKind {
    #[default]
    Linear,
    Cubic,
}

/// Extended class-K function: `k s` or `k s³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassKappa {
    pub kind: KappaKind,
    pub gain: f64,
}

impl ClassKappa {
    pub fn new(kind: KappaKind, gain: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::param("class-K gain", "must be finite and > 0"));
        }
        Ok(Self { kind, gain })
    }

    pub fn linear(gain: f64) -> Self {
        Self::new(KappaKind::Linear, gain).expect("positive gain")
    }

    pub fn cubic(gain: f64) -> Self {
        Self::new(KappaKind::Cubic, gain).expect("positive gain")
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self.kind {
            KappaKind::Linear => self.gain * s,
            KappaKind::Cubic => self.gain * s * s * s,
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match self.kind {
            KappaKind::Linear => self.gain,
            KappaKind::Cubic => 3.0 * self.gain * s * s,
        }
    }
}

/// `coeff · u >= rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub coeff: DVector<f64>,
    pub rhs: f64,
}

impl AffineConstraint {
    pub fn new(coeff: DVector<f64>, rhs: f64) -> Self {
        Self { coeff, rhs }
    }

    /// `coeff · u - rhs`; nonnegative when satisfied.
    pub fn margin(&self, u: &ControlVector) -> f64 {
        self.coeff.dot(u) - self.rhs
    }

    pub fn is_finite(&self) -> bool {
        self.rhs.is_finite() && self.coeff.iter().all(|c| c.is_finite())
    }
}

/// A barrier `h` of input relative degree `m` with its closed-form Lie
/// derivatives.
#[derive(Clone)]
pub struct ConstraintSpec {
    pub name: String,
    pub relative_degree: usize,
    pub h: ScalarField,
    /// `L_f^k h` for `k = 1..=m`.
    pub lie_f: Vec<ScalarField>,
    /// `L_g L_f^{m-1} h`, one entry per input.
    pub lie_g_lie_f: RowField,
    /// `[L_f^{m-1} h]_x`, one entry per state.
    pub grad_row: RowField,
    /// `O(h) = Σ_{i=1}^{m-1} L_f^i (β_{m-i} ∘ φ_{m-i-1})`.
    pub o_term: ScalarField,
    pub betas: Vec<ClassKappa>,
    /// `φ_i` for `i >= 2`, needed only when `m >= 3`.
    pub higher_phi: Vec<ScalarField>,
}

impl fmt::Debug for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSpec")
            .field("name", &self.name)
            .field("relative_degree", &self.relative_degree)
            .field("betas", &self.betas)
            .finish_non_exhaustive()
    }
}

impl ConstraintSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        relative_degree: usize,
        h: ScalarField,
        lie_f: Vec<ScalarField>,
        lie_g_lie_f: RowField,
        grad_row: RowField,
        o_term: ScalarField,
        betas: Vec<ClassKappa>,
        higher_phi: Vec<ScalarField>,
    ) -> Result<Self> {
        let m = relative_degree;
        if m == 0 {
            return Err(Error::param("relative degree", "must be >= 1"));
        }
        if lie_f.len() != m {
            return Err(Error::param("lie_f", format!("expected {m} Lie derivatives, got {}", lie_f.len())));
        }
        if betas.len() != m {
            return Err(Error::param("betas", format!("expected {m} class-K functions, got {}", betas.len())));
        }
        if higher_phi.len() != m.saturating_sub(2) {
            return Err(Error::param(
                "higher_phi",
                format!("expected {} closed-form φ_i (i >= 2), got {}", m.saturating_sub(2), higher_phi.len()),
            ));
        }
        Ok(Self {
            name: name.into(),
            relative_degree: m,
            h,
            lie_f,
            lie_g_lie_f,
            grad_row,
            o_term,
            betas,
            higher_phi,
        })
    }

    /// Relative degree one: `O(h) ≡ 0` and the gradient row is `h_x`.
    pub fn relative_degree_one(
        name: impl Into<String>,
        h: ScalarField,
        lie_f_h: ScalarField,
        lie_g_h: RowField,
        h_x: RowField,
        beta: ClassKappa,
    ) -> Self {
        Self::new(name, 1, h, vec![lie_f_h], lie_g_h, h_x, Arc::new(|_| 0.0), vec![beta], vec![])
            .expect("consistent relative-degree-one spec")
    }

    /// Relative degree two, with `O(h) = β_1'(h) L_f h` built from `β_1`.
    #[allow(clippy::too_many_arguments)]
    pub fn relative_degree_two(
        name: impl Into<String>,
        h: ScalarField,
        lie_f_h: ScalarField,
        lie_f2_h: ScalarField,
        lie_g_lie_f_h: RowField,
        grad_lie_f_h: RowField,
        beta1: ClassKappa,
        beta2: ClassKappa,
    ) -> Self {
        let (h_o, lf_o) = (h.clone(), lie_f_h.clone());
        let o_term: ScalarField = Arc::new(move |x| beta1.derivative(h_o(x)) * lf_o(x));
        Self::new(
            name,
            2,
            h,
            vec![lie_f_h, lie_f2_h],
            lie_g_lie_f_h,
            grad_lie_f_h,
            o_term,
            vec![beta1, beta2],
            vec![],
        )
        .expect("consistent relative-degree-two spec")
    }

    /// `[φ_0(x), …, φ_{m-1}(x)]` with `φ_0 = h` and
    /// `φ_1 = L_f h + β_1(h)` (the input does not enter `ḣ` when `m >= 2`).
    pub fn phi_sequence(&self, x: &StateVector) -> Vec<f64> {
        let m = self.relative_degree;
        let mut phi = Vec::with_capacity(m);
        let h = (self.h)(x);
        phi.push(h);
        if m >= 2 {
            phi.push((self.lie_f[0])(x) + self.betas[0].eval(h));
        }
        for f in &self.higher_phi {
            phi.push(f(x));
        }
        phi
    }

    /// Everything in the condition that does not depend on `u` or the
    /// disturbance: `L_f^m h + O(h) + β_m(φ_{m-1})`.
    pub fn drift_terms(&self, x: &StateVector) -> f64 {
        let m = self.relative_degree;
        let phi = self.phi_sequence(x);
        (self.lie_f[m - 1])(x) + (self.o_term)(x) + self.betas[m - 1].eval(phi[m - 1])
    }

    /// `coeff · u >= rhs` equivalent to `K(t, x, u) + β_m(φ_{m-1}(x)) >= 0`.
    pub fn assemble_constraint(&self, x: &StateVector, d_hat: &DisturbanceVector, delta: f64) -> AffineConstraint {
        let grad = (self.grad_row)(x);
        let coeff = (self.lie_g_lie_f)(x);
        let rhs = -(self.drift_terms(x) + grad.dot(d_hat) - grad.norm() * delta);
        AffineConstraint { coeff, rhs }
    }

    /// Design-time DOB-CBF check at `x`: the supremum over the input box of
    /// the condition with the worst-case factor `θ + 2 max δ` is nonnegative.
    pub fn check_worst_case(&self, x: &StateVector, theta: f64, delta_max: f64, input_box: &BoxSet) -> bool {
        self.worst_case_margin(x, theta, delta_max, input_box) >= 0.0
    }

    pub fn worst_case_margin(&self, x: &StateVector, theta: f64, delta_max: f64, input_box: &BoxSet) -> f64 {
        let coeff = (self.lie_g_lie_f)(x);
        let best_u = input_box.maximizing_vertex(&coeff);
        let grad = (self.grad_row)(x);
        self.drift_terms(x) + coeff.dot(&best_u) - grad.norm() * (theta + 2.0 * delta_max)
    }

    /// Left side of the barrier condition with the true disturbance.
    pub fn true_condition_value(&self, x: &StateVector, u: &ControlVector, d_true: &DisturbanceVector) -> f64 {
        self.drift_terms(x) + (self.lie_g_lie_f)(x).dot(u) + (self.grad_row)(x).dot(d_true)
    }

    pub fn true_condition_holds(&self, x: &StateVector, u: &ControlVector, d_true: &DisturbanceVector) -> bool {
        self.true_condition_value(x, u, d_true) >= 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar relative-degree-one spec with constant Lie data.
    fn scalar_spec(lf: f64, lg: f64, hx: f64, h: f64, k: f64) -> ConstraintSpec {
        ConstraintSpec::relative_degree_one(
            "scalar",
            Arc::new(move |_| h),
            Arc::new(move |_| lf),
            Arc::new(move |_| DVector::from_element(1, lg)),
            Arc::new(move |_| DVector::from_element(1, hx)),
            ClassKappa::linear(k),
        )
    }

    #[test]
    fn class_kappa_shapes() {
        let l = ClassKappa::linear(2.0);
        let c = ClassKappa::cubic(2.0);
        assert_eq!(l.eval(0.0), 0.0);
        assert_eq!(c.eval(0.0), 0.0);
        assert_eq!(l.eval(1.5), 3.0);
        assert_eq!(c.eval(-1.0), -2.0);
        assert_eq!(c.derivative(1.0), 6.0);
        assert!(ClassKappa::new(KappaKind::Linear, 0.0).is_err());
    }

    #[test]
    fn relative_degree_one_phi_is_h() {
        let spec = scalar_spec(1.0, 2.0, 1.0, 0.25, 2.0);
        let x = DVector::zeros(1);
        assert_eq!(spec.phi_sequence(&x), vec![0.25]);
        assert_eq!((spec.o_term)(&x), 0.0);
    }

    #[test]
    fn assembled_scalar_example() {
        // L_f h = 1, L_g h = 2, h_x = 1, d̂ = 0.3, δ = 0.1, β(h) = 0.5.
        let spec = scalar_spec(1.0, 2.0, 1.0, 0.5, 1.0);
        let x = DVector::zeros(1);
        let c = spec.assemble_constraint(&x, &DVector::from_element(1, 0.3), 0.1);
        assert_eq!(c.coeff[0], 2.0);
        assert!((c.rhs + 1.7).abs() < 1e-15);
    }

    #[test]
    fn nominal_condition_when_uncertainty_vanishes() {
        let spec = scalar_spec(-0.4, 1.5, 2.0, 0.3, 3.0);
        let x = DVector::zeros(1);
        let c = spec.assemble_constraint(&x, &DVector::zeros(1), 0.0);
        // L_f h + L_g h u + β(h) >= 0  <=>  1.5 u >= 0.4 - 0.9
        assert!((c.rhs + 0.5).abs() < 1e-15);
    }

    #[test]
    fn delta_tightens_rhs_linearly() {
        let spec = scalar_spec(0.2, 1.0, -3.0, 0.1, 1.0);
        let x = DVector::zeros(1);
        let d = DVector::from_element(1, 0.05);
        let r0 = spec.assemble_constraint(&x, &d, 0.1).rhs;
        let r1 = spec.assemble_constraint(&x, &d, 0.35).rhs;
        assert!((r1 - r0 - 3.0 * 0.25).abs() < 1e-14);
    }

    #[test]
    fn worst_case_check_cases() {
        let unit = BoxSet::symmetric(&[1.0]).unwrap();
        let x = DVector::zeros(1);
        // Nominal condition satisfiable with no uncertainty.
        assert!(scalar_spec(-1.0, 2.0, 1.0, 0.0, 1.0).check_worst_case(&x, 0.0, 0.0, &unit));
        // Tiny input authority cannot cover θ + 2δ.
        let tiny = BoxSet::symmetric(&[0.01]).unwrap();
        let spec = scalar_spec(0.0, 1.0, 1.0, 0.0, 1.0);
        assert!(!spec.check_worst_case(&x, 0.5, 0.5, &tiny));
        assert!(spec.check_worst_case(&x, 0.0, 0.0, &tiny));
    }

    #[test]
    fn true_condition_equals_assembled_when_estimate_exact() {
        let spec = scalar_spec(0.3, -1.0, 2.0, 0.2, 1.0);
        let x = DVector::zeros(1);
        let d = DVector::from_element(1, -0.7);
        let u = DVector::from_element(1, 0.4);
        let c = spec.assemble_constraint(&x, &d, 0.0);
        assert!((c.margin(&u) - spec.true_condition_value(&x, &u, &d)).abs() < 1e-12);
    }
}
