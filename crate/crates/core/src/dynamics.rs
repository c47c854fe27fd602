//! Uncertain control-affine systems `ẋ = f(x) + g(x)u + d(x)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type StateVector = DVector<f64>;
pub type ControlVector = DVector<f64>;
pub type DisturbanceVector = DVector<f64>;

pub type VectorField = Arc<dyn Fn(&StateVector) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&StateVector) -> DMatrix<f64> + Send + Sync>;

/// Axis-aligned box `{ z : lower <= z <= upper }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::param("box", "box must have at least one dimension"));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::param("box", format!("bound {i} is not finite")));
            }
            if lo > hi {
                return Err(Error::param("box", format!("lower[{i}] = {lo} > upper[{i}] = {hi}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[-r_i, r_i]`.
    pub fn symmetric(radii: &[f64]) -> Result<Self> {
        Self::new(radii.iter().map(|r| -r).collect(), radii.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)),
        )
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        z.len() == self.dim()
            && z.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }

    pub fn clamp(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            z.len(),
            z.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        )
    }

    /// Box scaled about its center; `factor = 2` doubles every half-width.
    pub fn scaled(&self, factor: f64) -> BoxSet {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| {
                let c = 0.5 * (l + u);
                let w = 0.5 * (u - l) * factor;
                (c - w, c + w)
            })
            .unzip();
        BoxSet { lower, upper }
    }

    /// All `2^k` vertices, in binary counting order.
    pub fn vertices(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        let k = self.dim();
        (0..1usize << k).map(move |mask| {
            DVector::from_iterator(
                k,
                (0..k).map(|i| if mask >> i & 1 == 1 { self.upper[i] } else { self.lower[i] }),
            )
        })
    }

    /// Vertex maximizing the linear functional `c·z` (lower bound on ties).
    pub fn maximizing_vertex(&self, c: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| if c[i] > 0.0 { self.upper[i] } else { self.lower[i] }),
        )
    }

    /// Largest Euclidean norm over the box; attained at a vertex.
    pub fn max_norm(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// The `index`-th point of a uniform grid with `p` points per axis
    /// (endpoints included, so the grid contains every vertex).
    pub fn grid_point(&self, p: usize, mut index: usize) -> DVector<f64> {
        let p = p.max(2);
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| {
                let j = index % p;
                index /= p;
                self.lower[i] + (self.upper[i] - self.lower[i]) * j as f64 / (p - 1) as f64
            }),
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(l, u)| if l == u { *l } else { rng.random_range(*l..=*u) }),
        )
    }
}

/// Nominal model `(f, g)` plus the compact sets and the Lipschitz data of the
/// unknown part.
#[derive(Clone)]
pub struct SystemModel {
    pub n: usize,
    pub m: usize,
    pub drift: VectorField,
    pub input_matrix: MatrixField,
    pub state_box: BoxSet,
    pub input_box: BoxSet,
    /// `l_d`: Lipschitz constant of the disturbance on the state box.
    pub lipschitz_const: f64,
    /// `b_d`: bound on the disturbance norm at the origin.
    pub origin_bound: f64,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("state_box", &self.state_box)
            .field("input_box", &self.input_box)
            .field("lipschitz_const", &self.lipschitz_const)
            .field("origin_bound", &self.origin_bound)
            .finish_non_exhaustive()
    }
}

impl SystemModel {
    pub fn new(
        drift: VectorField,
        input_matrix: MatrixField,
        state_box: BoxSet,
        input_box: BoxSet,
        lipschitz_const: f64,
        origin_bound: f64,
    ) -> Result<Self> {
        if !(lipschitz_const >= 0.0 && lipschitz_const.is_finite()) {
            return Err(Error::param("lipschitz_const", "must be finite and >= 0"));
        }
        if !(origin_bound >= 0.0 && origin_bound.is_finite()) {
            return Err(Error::param("origin_bound", "must be finite and >= 0"));
        }
        Ok(Self {
            n: state_box.dim(),
            m: input_box.dim(),
            drift,
            input_matrix,
            state_box,
            input_box,
            lipschitz_const,
            origin_bound,
        })
    }

    /// Same model with different disturbance constants.
    pub fn with_disturbance_bounds(&self, lipschitz_const: f64, origin_bound: f64) -> Self {
        Self {
            lipschitz_const,
            origin_bound,
            ..self.clone()
        }
    }

    /// `f(x) + g(x)u`.
    pub fn nominal(&self, x: &StateVector, u: &ControlVector) -> StateVector {
        (self.drift)(x) + (self.input_matrix)(x) * u
    }
}

/// Unknown disturbance `d(x)` with its declared Lipschitz data.
#[derive(Clone)]
pub struct DisturbanceFn {
    pub eval: VectorField,
    pub declared_lipschitz: f64,
    pub declared_origin_bound: f64,
}

impl fmt::Debug for DisturbanceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DisturbanceFn")
            .field("declared_lipschitz", &self.declared_lipschitz)
            .field("declared_origin_bound", &self.declared_origin_bound)
            .finish_non_exhaustive()
    }
}

impl DisturbanceFn {
    pub fn new(eval: VectorField, declared_lipschitz: f64, declared_origin_bound: f64) -> Self {
        Self {
            eval,
            declared_lipschitz,
            declared_origin_bound,
        }
    }

    pub fn zero(n: usize) -> Self {
        Self::new(Arc::new(move |_| DVector::zeros(n)), 0.0, 0.0)
    }

    pub fn constant(value: DVector<f64>) -> Self {
        let b = value.norm();
        Self::new(Arc::new(move |_| value.clone()), 0.0, b)
    }

    pub fn at(&self, x: &StateVector) -> DisturbanceVector {
        (self.eval)(x)
    }
}

/// `ẋ = f(x) + g(x)u + d`.
pub fn eval_dynamics(
    model: &SystemModel,
    x: &StateVector,
    u: &ControlVector,
    d: &DisturbanceVector,
) -> Result<StateVector> {
    check_dim("state", model.n, x.len())?;
    check_dim("control", model.m, u.len())?;
    check_dim("disturbance", model.n, d.len())?;
    Ok(model.nominal(x, u) + d)
}

/// RK4 stage states `[x, x + h/2 k1, x + h/2 k2, x + h k3]`.
///
/// The observer's predictor is driven by these so that plant and predictor
/// together form one RK4 step of the augmented system.
#[derive(Debug, Clone)]
pub struct StageStates(pub [StateVector; 4]);

impl StageStates {
    /// Zero-order hold of the measured state over the step.
    pub fn held(x: &StateVector) -> Self {
        StageStates([x.clone(), x.clone(), x.clone(), x.clone()])
    }

    /// First-order hold between the measured states at both step ends.
    pub fn linear(start: &StateVector, end: &StateVector) -> Self {
        let mid = (start + end) * 0.5;
        StageStates([start.clone(), mid.clone(), mid, end.clone()])
    }
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One classical RK4 step of `ẋ = rhs(stage, x)`; also returns the stage states.
pub(crate) fn rk4_with_stages<F>(x: &DVector<f64>, dt: f64, mut rhs: F) -> Result<(DVector<f64>, StageStates)>
where
    F: FnMut(usize, &DVector<f64>) -> DVector<f64>,
{
    let k1 = rhs(0, x);
    if !finite(&k1) {
        return Err(Error::IntegrationBlowup { stage: 1 });
    }
    let x2 = x + &k1 * (0.5 * dt);
    let k2 = rhs(1, &x2);
    if !finite(&k2) {
        return Err(Error::IntegrationBlowup { stage: 2 });
    }
    let x3 = x + &k2 * (0.5 * dt);
    let k3 = rhs(2, &x3);
    if !finite(&k3) {
        return Err(Error::IntegrationBlowup { stage: 3 });
    }
    let x4 = x + &k3 * dt;
    let k4 = rhs(3, &x4);
    if !finite(&k4) {
        return Err(Error::IntegrationBlowup { stage: 4 });
    }
    let next = x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
    if !finite(&next) {
        return Err(Error::IntegrationBlowup { stage: 4 });
    }
    Ok((next, StageStates([x.clone(), x2, x3, x4])))
}

/// RK4 step with zero-order-hold input; returns the next state and the stage
/// states (needed to drive the observer consistently).
pub fn step_rk4_stages(
    model: &SystemModel,
    x: &StateVector,
    u: &ControlVector,
    d_fn: &DisturbanceFn,
    dt: f64,
) -> Result<(StateVector, StageStates)> {
    check_dim("state", model.n, x.len())?;
    check_dim("control", model.m, u.len())?;
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::param("dt", "must be > 0"));
    }
    rk4_with_stages(x, dt, |_, z| model.nominal(z, u) + d_fn.at(z))
}

pub fn step_rk4(
    model: &SystemModel,
    x: &StateVector,
    u: &ControlVector,
    d_fn: &DisturbanceFn,
    dt: f64,
) -> Result<StateVector> {
    step_rk4_stages(model, x, u, d_fn, dt).map(|(x, _)| x)
}

/// One `A sin(w·x + phase)` term.
#[derive(Debug, Clone)]
struct Sinusoid {
    amplitude: f64,
    frequency: DVector<f64>,
    phase: f64,
}

const SINUSOIDS_PER_COORD: usize = 3;

/// Random smooth disturbance with certified Assumption-1 constants.
///
/// Coordinate `j` is `c_j + Σ_k A_jk sin(w_jk·x + φ_jk)`. Each row of the
/// Jacobian has norm at most `Σ_k |A_jk| ‖w_jk‖ = l_d / √n`, so the Frobenius
/// norm (and hence the spectral norm) is at most `l_d` everywhere. The offsets
/// `c_j` pin `d(0)` to a random vector of norm at most `b_d`.
pub fn sample_lipschitz_disturbance(seed: u64, l_d: f64, b_d: f64, domain: &BoxSet) -> DisturbanceFn {
    let n = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_width = domain
        .lower()
        .iter()
        .zip(domain.upper())
        .map(|(l, u)| 0.5 * (u - l))
        .fold(0.0, f64::max)
        .max(1e-3);
    let per_row = l_d.max(0.0) / (n as f64).sqrt();

    let mut rows: Vec<Vec<Sinusoid>> = Vec::with_capacity(n);
    for _ in 0..n {
        let shares: Vec<f64> = (0..SINUSOIDS_PER_COORD).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = shares.iter().sum();
        let row = shares
            .iter()
            .map(|share| {
                // One to three half-periods across the widest box side.
                let magnitude = rng.random_range(0.5..3.0) * PI / (2.0 * half_width);
                let direction = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let direction = if direction.norm() > 1e-9 {
                    direction.normalize()
                } else {
                    DVector::from_element(n, 1.0 / (n as f64).sqrt())
                };
                Sinusoid {
                    amplitude: per_row * share / total / magnitude,
                    frequency: direction * magnitude,
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            })
            .collect();
        rows.push(row);
    }

    let target = {
        let dir = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let scale = b_d.max(0.0) * rng.random_range(0.5..1.0);
        if dir.norm() > 1e-9 {
            dir.normalize() * scale
        } else {
            DVector::zeros(n)
        }
    };
    let offsets: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(j, row)| target[j] - row.iter().map(|s| s.amplitude * s.phase.sin()).sum::<f64>())
        .collect();

    let eval: VectorField = Arc::new(move |x: &StateVector| {
        DVector::from_iterator(
            n,
            rows.iter().zip(&offsets).map(|(row, c)| {
                c + row
                    .iter()
                    .map(|s| s.amplitude * (s.frequency.dot(x) + s.phase).sin())
                    .sum::<f64>()
            }),
        )
    });
    DisturbanceFn::new(eval, l_d.max(0.0), b_d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(drift: f64, gain: f64) -> SystemModel {
        SystemModel::new(
            Arc::new(move |x: &StateVector| x * drift),
            Arc::new(move |_: &StateVector| DMatrix::from_element(1, 1, gain)),
            BoxSet::symmetric(&[10.0]).unwrap(),
            BoxSet::symmetric(&[10.0]).unwrap(),
            0.0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_dynamics() {
        let model = SystemModel::new(
            Arc::new(|_: &StateVector| DVector::zeros(2)),
            Arc::new(|_: &StateVector| DMatrix::identity(2, 2)),
            BoxSet::symmetric(&[1.0, 1.0]).unwrap(),
            BoxSet::symmetric(&[1.0, 1.0]).unwrap(),
            0.0,
            0.0,
        )
        .unwrap();
        let z = DVector::zeros(2);
        assert_eq!(eval_dynamics(&model, &z, &z, &z).unwrap(), z);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = scalar_model(0.0, 1.0);
        let err = eval_dynamics(&model, &DVector::zeros(2), &DVector::zeros(1), &DVector::zeros(1));
        assert!(matches!(
            err,
            Err(Error::DimensionMismatch { what: "state", expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn rk4_decay_matches_exponential() {
        let model = scalar_model(-1.0, 0.0);
        let x = step_rk4(&model, &DVector::from_element(1, 1.0), &DVector::zeros(1), &DisturbanceFn::zero(1), 0.1)
            .unwrap();
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
        assert!((x[0] - 0.904837418).abs() < 1e-7);
    }

    #[test]
    fn rk4_integrates_constant_rate_exactly() {
        let model = scalar_model(0.0, 1.0);
        let x = step_rk4(&model, &DVector::zeros(1), &DVector::from_element(1, 2.0), &DisturbanceFn::zero(1), 0.5)
            .unwrap();
        assert_eq!(x[0], 1.0);
    }

    #[test]
    fn rk4_still_state() {
        let model = scalar_model(0.0, 0.0);
        let x0 = DVector::from_element(1, 0.37);
        let x = step_rk4(&model, &x0, &DVector::zeros(1), &DisturbanceFn::zero(1), 0.3).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn rk4_reports_blowup_stage() {
        let model = scalar_model(0.0, 0.0);
        let bad = DisturbanceFn::new(Arc::new(|_| DVector::from_element(1, f64::NAN)), 0.0, 0.0);
        let err = step_rk4(&model, &DVector::zeros(1), &DVector::zeros(1), &bad, 0.1);
        assert!(matches!(err, Err(Error::IntegrationBlowup { stage: 1 })));
    }

    #[test]
    fn degenerate_disturbance_constants() {
        let domain = BoxSet::symmetric(&[2.0, 2.0]).unwrap();
        let zero = sample_lipschitz_disturbance(3, 0.0, 0.0, &domain);
        let constant = sample_lipschitz_disturbance(3, 0.0, 1.0, &domain);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c0 = constant.at(&DVector::zeros(2));
        assert!(c0.norm() <= 1.0 + 1e-12);
        for _ in 0..100 {
            let x = domain.sample(&mut rng);
            assert!(zero.at(&x).norm() < 1e-15);
            assert!((constant.at(&x) - &c0).norm() < 1e-12);
        }
    }

    #[test]
    fn sampled_disturbance_slope_audit() {
        let domain = BoxSet::symmetric(&[3.0, 3.0, 6.0]).unwrap();
        let d = sample_lipschitz_disturbance(7, 2.0, 1.0, &domain);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let x = domain.sample(&mut rng);
            let y = domain.sample(&mut rng);
            let gap = (&x - &y).norm();
            if gap > 1e-9 {
                worst = worst.max((d.at(&x) - d.at(&y)).norm() / gap);
            }
        }
        assert!(worst <= 2.0 + 1e-6, "slope {worst}");
        assert!(d.at(&DVector::zeros(3)).norm() <= 1.0 + 1e-12);
        assert_eq!(d.declared_lipschitz, 2.0);
    }

    #[test]
    fn box_queries() {
        let b = BoxSet::new(vec![-1.0, 0.0], vec![2.0, 3.0]).unwrap();
        assert_eq!(b.vertices().count(), 4);
        assert!((b.max_norm() - (4.0f64 + 9.0).sqrt()).abs() < 1e-15);
        let c = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(b.maximizing_vertex(&c), DVector::from_vec(vec![2.0, 0.0]));
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
        assert_eq!(b.grid_point(3, 8), DVector::from_vec(vec![2.0, 3.0]));
        assert_eq!(b.scaled(2.0).lower(), &[-2.5, -1.5]);
    }
}
