//! Small dense QP for the safety filter:
//!
//! ```text
//!     min_u  ½ (u - u_ref)ᵀ P (u - u_ref)
//!     s.t.   a_iᵀ u >= b_i      (barrier rows)
//!            lo <= u <= hi      (input box, never relaxed)
//! ```
//!
//! Solved with the Goldfarb–Idnani dual active-set method, which starts from
//! the unconstrained minimizer `u_ref`, needs no feasible starting point and
//! detects infeasibility exactly. When the barrier rows cannot be met inside
//! the box, the problem is re-solved with one slack per barrier row penalized
//! by `ρ Σ s_i²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{BoxSet, ControlVector};
use crate::error::{check_dim, Error, Result};
use crate::hocbf::AffineConstraint;

pub const DEFAULT_PENALTY: f64 = 1e6;
pub const DEFAULT_REGULARIZATION: f64 = 1e-10;
/// Margin below which an inequality counts as active in [`verify_kkt`].
const ACTIVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub weight: DMatrix<f64>,
    pub u_ref: ControlVector,
    pub ineqs: Vec<AffineConstraint>,
    pub bounds: BoxSet,
}

impl QpProblem {
    pub fn new(weight: DMatrix<f64>, u_ref: ControlVector, ineqs: Vec<AffineConstraint>, bounds: BoxSet) -> Result<Self> {
        let m = u_ref.len();
        check_dim("QP weight rows", m, weight.nrows())?;
        check_dim("QP weight columns", m, weight.ncols())?;
        check_dim("QP box", m, bounds.dim())?;
        for c in &ineqs {
            check_dim("QP constraint", m, c.coeff.len())?;
            if !c.is_finite() {
                return Err(Error::param("QP constraint", "non-finite coefficients"));
            }
        }
        if (&weight - weight.transpose()).amax() > 1e-12 * weight.amax().max(1.0) {
            return Err(Error::param("QP weight", "must be symmetric"));
        }
        if weight.clone().cholesky().is_none() {
            return Err(Error::param("QP weight", "must be positive definite"));
        }
        if u_ref.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("u_ref", "non-finite entries"));
        }
        Ok(Self { weight, u_ref, ineqs, bounds })
    }

    /// `P = I`.
    pub fn projection(u_ref: ControlVector, ineqs: Vec<AffineConstraint>, bounds: BoxSet) -> Result<Self> {
        let m = u_ref.len();
        Self::new(DMatrix::identity(m, m), u_ref, ineqs, bounds)
    }

    pub fn dim(&self) -> usize {
        self.u_ref.len()
    }

    pub fn objective(&self, u: &ControlVector) -> f64 {
        let e = u - &self.u_ref;
        0.5 * e.dot(&(&self.weight * &e))
    }

    /// Objective plus `ρ Σ s_i²` with `s_i = max(0, b_i - a_iᵀu)`.
    pub fn penalized_objective(&self, u: &ControlVector, penalty: f64) -> f64 {
        let s2: f64 = self.ineqs.iter().map(|c| (-c.margin(u)).max(0.0).powi(2)).sum();
        self.objective(u) + penalty * s2
    }

    /// Largest violation over barrier rows and box; `0` when feasible.
    pub fn max_violation(&self, u: &ControlVector) -> f64 {
        let rows = self.ineqs.iter().map(|c| (-c.margin(u)).max(0.0));
        let lo = self.bounds.lower().iter().zip(u.iter()).map(|(l, v)| (l - v).max(0.0));
        let hi = self.bounds.upper().iter().zip(u.iter()).map(|(h, v)| (v - h).max(0.0));
        rows.chain(lo).chain(hi).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Relaxed,
    Failed,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: ControlVector,
    pub status: QpStatus,
    /// `max(0, b_i - a_iᵀu)` per barrier row, in input order.
    pub slacks: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Multipliers of the barrier rows, in input order.
    pub multipliers: Vec<f64>,
    /// Set when `status` is `Failed`.
    pub failure: Option<String>,
}

impl QpSolution {
    pub fn relaxed(&self) -> bool {
        self.status == QpStatus::Relaxed
    }
}

/// One solver per trajectory.
#[derive(Debug, Clone)]
pub struct QpSolver {
    pub penalty: f64,
    pub regularization: f64,
    /// Iteration cap is `max_iter_factor × max(m, rows)`.
    pub max_iter_factor: usize,
}

impl Default for QpSolver {
    fn default() -> Self {
        Self {
            penalty: DEFAULT_PENALTY,
            regularization: DEFAULT_REGULARIZATION,
            max_iter_factor: 100,
        }
    }
}

/// A row `nᵀz >= b` in the (possibly slack-augmented) variable space.
struct Row {
    n: DVector<f64>,
    b: f64,
}

enum DualOutcome {
    Solved { z: DVector<f64>, active: Vec<usize>, lambda: Vec<f64>, iterations: usize },
    Infeasible { iterations: usize },
    Failed { iterations: usize, reason: String },
}

impl QpSolver {
    pub fn new(penalty: f64) -> Result<Self> {
        if !(penalty > 0.0 && penalty.is_finite()) {
            return Err(Error::param("slack penalty", "must be finite and > 0"));
        }
        Ok(Self {
            penalty,
            ..Self::default()
        })
    }

    pub fn solve(&mut self, p: &QpProblem) -> QpSolution {
        let m = p.dim();
        let (unique, owner) = dedup_rows(&p.ineqs);
        let mut rows: Vec<Row> = unique
            .iter()
            .map(|&i| Row {
                n: p.ineqs[i].coeff.clone(),
                b: p.ineqs[i].rhs,
            })
            .collect();
        rows.extend(box_rows(&p.bounds, m, 0));
        let max_iter = self.max_iter_factor * m.max(rows.len()).max(1);

        let weight_inv = match p.weight.clone().cholesky() {
            Some(c) => c.inverse(),
            None => return failed(p, 0, "weight matrix lost positive definiteness".into()),
        };
        match dual_active_set(&weight_inv, p.u_ref.clone(), &rows, self.regularization, max_iter) {
            DualOutcome::Solved { z, active, lambda, iterations } => {
                let mut mult_unique = vec![0.0; unique.len()];
                for (slot, &r) in active.iter().enumerate() {
                    if r < unique.len() {
                        mult_unique[r] = lambda[slot];
                    }
                }
                let multipliers = owner.iter().map(|o| o.map_or(0.0, |k| mult_unique[k])).collect();
                let mut sol = QpSolution {
                    slacks: p.ineqs.iter().map(|c| (-c.margin(&z)).max(0.0)).collect(),
                    u: z,
                    status: QpStatus::Optimal,
                    kkt_residual: 0.0,
                    iterations,
                    multipliers,
                    failure: None,
                };
                // Rounding can leave slacks around 1e-16 on active rows.
                for s in &mut sol.slacks {
                    if *s < 1e-12 {
                        *s = 0.0;
                    }
                }
                sol.kkt_residual = verify_kkt(p, &sol, self.penalty);
                sol
            }
            DualOutcome::Infeasible { iterations } => self.solve_relaxed(p, &unique, &owner, iterations),
            DualOutcome::Failed { iterations, reason } => failed(p, iterations, reason),
        }
    }

    fn solve_relaxed(&self, p: &QpProblem, unique: &[usize], owner: &[Option<usize>], prior: usize) -> QpSolution {
        let m = p.dim();
        let k = unique.len();
        let dim = m + k;
        let mut rows: Vec<Row> = unique
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut n = DVector::zeros(dim);
                n.rows_mut(0, m).copy_from(&p.ineqs[i].coeff);
                n[m + j] = 1.0;
                Row { n, b: p.ineqs[i].rhs }
            })
            .collect();
        rows.extend(box_rows(&p.bounds, m, k));
        let max_iter = self.max_iter_factor * dim.max(rows.len());

        let Some(chol) = p.weight.clone().cholesky() else {
            return failed(p, prior, "weight matrix lost positive definiteness".into());
        };
        let mut h_inv = DMatrix::zeros(dim, dim);
        h_inv.view_mut((0, 0), (m, m)).copy_from(&chol.inverse());
        for j in 0..k {
            h_inv[(m + j, m + j)] = 1.0 / (2.0 * self.penalty);
        }
        let mut start = DVector::zeros(dim);
        start.rows_mut(0, m).copy_from(&p.u_ref);

        match dual_active_set(&h_inv, start, &rows, self.regularization, max_iter) {
            DualOutcome::Solved { z, active, lambda, iterations } => {
                // Large slack multipliers leave box rows off by roundoff; the
                // box is hard, so project.
                let u = p.bounds.clamp(&z.rows(0, m).into_owned());
                let mut mult_unique = vec![0.0; k];
                for (slot, &r) in active.iter().enumerate() {
                    if r < k {
                        mult_unique[r] = lambda[slot];
                    }
                }
                let slacks: Vec<f64> = p.ineqs.iter().map(|c| (-c.margin(&u)).max(0.0)).collect();
                let mut sol = QpSolution {
                    u,
                    status: QpStatus::Relaxed,
                    slacks,
                    kkt_residual: 0.0,
                    iterations: prior + iterations,
                    multipliers: owner.iter().map(|o| o.map_or(0.0, |j| mult_unique[j])).collect(),
                    failure: None,
                };
                sol.kkt_residual = verify_kkt(p, &sol, self.penalty);
                sol
            }
            DualOutcome::Infeasible { iterations } => failed(
                p,
                prior + iterations,
                "slack-relaxed problem reported infeasible".into(),
            ),
            DualOutcome::Failed { iterations, reason } => failed(p, prior + iterations, reason),
        }
    }
}

fn failed(p: &QpProblem, iterations: usize, reason: String) -> QpSolution {
    let u = p.bounds.clamp(&p.u_ref);
    QpSolution {
        slacks: p.ineqs.iter().map(|c| (-c.margin(&u)).max(0.0)).collect(),
        u,
        status: QpStatus::Failed,
        kkt_residual: f64::INFINITY,
        iterations,
        multipliers: vec![0.0; p.ineqs.len()],
        failure: Some(reason),
    }
}

/// Collapses rows with bitwise-identical coefficients, keeping the largest
/// right-hand side. Returns the kept row indices and, per input row, the
/// slot of its representative when that row is the binding copy.
fn dedup_rows(ineqs: &[AffineConstraint]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut kept: Vec<usize> = Vec::with_capacity(ineqs.len());
    let mut slot_of: Vec<usize> = Vec::with_capacity(ineqs.len());
    for (i, c) in ineqs.iter().enumerate() {
        let bits = |v: &DVector<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let key = bits(&c.coeff);
        match kept.iter().position(|&j| bits(&ineqs[j].coeff) == key) {
            Some(s) => {
                if c.rhs > ineqs[kept[s]].rhs {
                    kept[s] = i;
                }
                slot_of.push(s);
            }
            None => {
                slot_of.push(kept.len());
                kept.push(i);
            }
        }
    }
    let owner = slot_of
        .iter()
        .enumerate()
        .map(|(i, &s)| (kept[s] == i).then_some(s))
        .collect();
    (kept, owner)
}

/// `u_j >= lo_j` then `-u_j >= -hi_j`, embedded in a `dim`-vector whose
/// first `m` entries are `u`.
fn box_rows(bounds: &BoxSet, m: usize, extra: usize) -> Vec<Row> {
    let dim = m + extra;
    let mut rows = Vec::with_capacity(2 * m);
    for j in 0..m {
        let mut lo = DVector::zeros(dim);
        lo[j] = 1.0;
        rows.push(Row { n: lo, b: bounds.lower()[j] });
        let mut hi = DVector::zeros(dim);
        hi[j] = -1.0;
        rows.push(Row { n: hi, b: -bounds.upper()[j] });
    }
    rows
}

fn violation_tol(row: &Row, z: &DVector<f64>) -> f64 {
    1e-12 * (1.0 + row.b.abs() + row.n.amax() * z.amax())
}

/// Goldfarb–Idnani for `min ½ (z - z0)ᵀ H (z - z0)` s.t. `n_iᵀ z >= b_i`,
/// given `H⁻¹`. Violated rows enter lowest index first.
fn dual_active_set(h_inv: &DMatrix<f64>, z0: DVector<f64>, rows: &[Row], reg: f64, max_iter: usize) -> DualOutcome {
    let mut z = z0;
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut iterations = 0;

    loop {
        let next = (0..rows.len()).find(|&i| {
            !active.contains(&i) && rows[i].n.dot(&z) - rows[i].b < -violation_tol(&rows[i], &z)
        });
        let Some(p) = next else {
            return DualOutcome::Solved { z, active, lambda, iterations };
        };
        let np = &rows[p].n;
        let mut lambda_p = 0.0;
        let mut regularized = false;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return DualOutcome::Failed {
                    iterations,
                    reason: format!("iteration cap {max_iter} exceeded"),
                };
            }
            let hn = h_inv * np;
            let (step, r) = if active.is_empty() {
                (hn.clone(), DVector::zeros(0))
            } else {
                let k = active.len();
                let n_mat = DMatrix::from_fn(np.len(), k, |i, j| rows[active[j]].n[i]);
                let hin = h_inv * &n_mat;
                let reduced = n_mat.transpose() * &hin;
                // Regularize only when the active rows are numerically dependent.
                let chol = match reduced.clone().cholesky() {
                    Some(c) => c,
                    None => {
                        let shift = reg * (1.0 + reduced.diagonal().amax());
                        regularized = true;
                        match (reduced + DMatrix::identity(k, k) * shift).cholesky() {
                            Some(c) => c,
                            None => {
                                return DualOutcome::Failed {
                                    iterations,
                                    reason: "active-set KKT system singular after regularization".into(),
                                }
                            }
                        }
                    }
                };
                let r = chol.solve(&(n_mat.transpose() * &hn));
                (&hn - hin * &r, r)
            };

            // Dual step length: first active multiplier driven to zero.
            let mut t_dual = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 0.0 {
                    let t = lambda[j] / rj;
                    if t < t_dual {
                        t_dual = t;
                        drop = Some(j);
                    }
                }
            }

            let curvature = step.dot(np);
            // On a dependent row the projected step is rounding noise (or of
            // order `reg` after regularization) relative to `H⁻¹ n_p`.
            let dep_tol = if regularized { 100.0 * reg } else { 1e-11 };
            if !(step.norm() > dep_tol * hn.norm() && curvature > 0.0) {
                // Row p is linearly dependent on the active rows.
                let Some(k) = drop else {
                    return DualOutcome::Infeasible { iterations };
                };
                for (lj, rj) in lambda.iter_mut().zip(r.iter()) {
                    *lj = (*lj - t_dual * rj).max(0.0);
                }
                lambda_p += t_dual;
                active.remove(k);
                lambda.remove(k);
                continue;
            }

            let t_primal = -(np.dot(&z) - rows[p].b) / curvature;
            let t = t_primal.min(t_dual);
            z += &step * t;
            for (lj, rj) in lambda.iter_mut().zip(r.iter()) {
                *lj = (*lj - t * rj).max(0.0);
            }
            lambda_p += t;
            if t_primal <= t_dual {
                active.push(p);
                lambda.push(lambda_p);
                break;
            }
            let k = drop.expect("finite dual step has a blocking row");
            active.remove(k);
            lambda.remove(k);
        }
    }
}

/// Max-norm of the KKT residuals (stationarity, primal feasibility,
/// complementarity) at `sol.u`. Multipliers are recomputed independently by
/// nonnegative least squares on the rows active at `sol.u`; for relaxed
/// solutions the barrier multipliers are fixed by the slack stationarity
/// `λ_i = 2ρ s_i` and the residual is evaluated on the penalized problem.
/// Stationarity is divided by `max(1, ‖∇‖∞, ‖2ρ Σ s_i |a_i|‖∞)`.
pub fn verify_kkt(p: &QpProblem, sol: &QpSolution, penalty: f64) -> f64 {
    let u = &sol.u;
    let m = p.dim();
    let grad = &p.weight * (u - &p.u_ref);
    let relaxed = sol.status == QpStatus::Relaxed;

    let mut fixed = DVector::zeros(m);
    let mut fixed_abs = DVector::zeros(m);
    let mut primal: f64 = 0.0;
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut col_margins: Vec<f64> = Vec::new();

    for c in &p.ineqs {
        let margin = c.margin(u);
        if relaxed {
            let s = (-margin).max(0.0);
            fixed += &c.coeff * (2.0 * penalty * s);
            fixed_abs += c.coeff.abs() * (2.0 * penalty * s);
            if s == 0.0 && margin.abs() <= ACTIVE_TOL * (1.0 + c.rhs.abs()) {
                columns.push(c.coeff.clone());
                col_margins.push(margin);
            }
        } else {
            primal = primal.max(-margin);
            if margin <= ACTIVE_TOL * (1.0 + c.rhs.abs()) {
                columns.push(c.coeff.clone());
                col_margins.push(margin);
            }
        }
    }
    for j in 0..m {
        let (lo, hi) = (p.bounds.lower()[j], p.bounds.upper()[j]);
        primal = primal.max(lo - u[j]).max(u[j] - hi);
        if u[j] - lo <= ACTIVE_TOL * (1.0 + lo.abs()) {
            let mut e = DVector::zeros(m);
            e[j] = 1.0;
            columns.push(e);
            col_margins.push(u[j] - lo);
        }
        if hi - u[j] <= ACTIVE_TOL * (1.0 + hi.abs()) {
            let mut e = DVector::zeros(m);
            e[j] = -1.0;
            columns.push(e);
            col_margins.push(hi - u[j]);
        }
    }

    let target = &grad - &fixed;
    // Stationarity is measured relative to the gradient terms, which reach
    // `2ρ s` on relaxed solves.
    let scale = 1.0f64.max(grad.amax()).max(fixed_abs.amax());
    let (stationarity, lambda) = if columns.is_empty() {
        (target.amax(), Vec::new())
    } else {
        let a = DMatrix::from_columns(&columns);
        let lambda = nnls(&a, &target);
        ((&a * &lambda - &target).amax(), lambda.iter().copied().collect())
    };
    let complementarity = lambda
        .iter()
        .zip(&col_margins)
        .map(|(l, s)| (l * s).abs())
        .fold(0.0, f64::max);
    (stationarity / scale).max(primal.max(0.0)).max(complementarity)
}

/// Lawson–Hanson nonnegative least squares: `min ‖A x - b‖` s.t. `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-14 * (1.0 + a.amax() * b.amax()) * n.max(1) as f64;
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let mut full = DVector::zeros(n);
        if idx.is_empty() {
            return full;
        }
        let sub = DMatrix::from_fn(a.nrows(), idx.len(), |i, j| a[(i, idx[j])]);
        let svd = sub.svd(true, true);
        if let Ok(s) = svd.solve(b, 1e-13) {
            for (k, &j) in idx.iter().enumerate() {
                full[j] = s[k];
            }
        }
        full
    };

    for _outer in 0..3 * n + 3 {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| {
            w[i].partial_cmp(&w[j]).unwrap_or(std::cmp::Ordering::Equal).then(j.cmp(&i))
        });
        let Some(j) = candidate else { break };
        passive[j] = true;
        for _inner in 0..3 * n + 3 {
            let s = solve_passive(&passive);
            if (0..n).filter(|&k| passive[k]).all(|k| s[k] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for k in (0..n).filter(|&k| passive[k] && s[k] <= 0.0) {
                alpha = alpha.min(x[k] / (x[k] - s[k]));
            }
            x += (&s - &x) * alpha;
            for k in 0..n {
                if passive[k] && x[k] <= tol {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
        }
    }
    x
}
