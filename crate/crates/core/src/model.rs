//! Problem and state types plus the three scalar functionals of the relaxed
//! formulation: the Bernoulli entropy of `Q`, the expected regression cost under
//! the factored selection distribution, and the free energy that the annealer
//! maximizes.
//!
//! Matrices follow nalgebra's column-major storage. `Q` is `d × k`: row `i` is a
//! feature, column `j` is a slot of the coefficient vector `x`.
//!
//! Multipliers are carried in cost units, so the free energy reads
//!
//! ```text
//! F_T = H(Q) - (1/T) [ (D(Q, x) - c0) + mu^T g(Q) + (rho/2) |g(Q)|^2 + P(Q) ]
//! ```
//!
//! with `g(Q) = Q^T 1_d - 1_k`, `rho = 1/T` and `P` the structural-constraint
//! penalty. In these units `(T/2) dF_T/dQ = Xi - (T/2) logit(Q)`, which is what
//! makes the Gibbs map in the solver a stationarity condition of `F_T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSet, Multipliers};
use crate::error::{Error, Result};
use crate::linalg::logit;

/// Entries of `Q` are kept in `[EPS_CLIP, 1 - EPS_CLIP]` wherever logarithms or
/// logits of them are taken.
pub const EPS_CLIP: f64 = 1e-12;

const DOMAIN_TOL: f64 = 1e-12;

/// A regression instance: design matrix, measurement and sparsity budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    a: DMatrix<f64>,
    y: DVector<f64>,
    k: usize,
    column_norms_sq: DVector<f64>,
    feature_names: Vec<String>,
}

impl Problem {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>, k: usize) -> Result<Self> {
        let (n, d) = a.shape();
        if n == 0 || d == 0 {
            return Err(Error::Shape("design matrix must be non-empty".into()));
        }
        if y.len() != n {
            return Err(Error::Shape(format!(
                "measurement has length {} but design matrix has {} rows",
                y.len(),
                n
            )));
        }
        if k == 0 || k > d {
            return Err(Error::Domain(format!("sparsity k = {k} must lie in [1, {d}]")));
        }
        if a.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry in A or y".into()));
        }
        let column_norms_sq = DVector::from_iterator(d, a.column_iter().map(|c| c.norm_squared()));
        let feature_names = (1..=d).map(|j| format!("a{j}")).collect();
        Ok(Self { a, y, k, column_norms_sq, feature_names })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d() {
            return Err(Error::Shape(format!(
                "{} feature names for {} columns",
                names.len(),
                self.d()
            )));
        }
        self.feature_names = names;
        Ok(self)
    }

    /// Same data with a different sparsity budget.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        let d = self.d();
        if k == 0 || k > d {
            return Err(Error::Domain(format!("sparsity k = {k} must lie in [1, {d}]")));
        }
        let mut p = self.clone();
        p.k = k;
        Ok(p)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    /// `a_j^T a_j` for every column.
    pub fn column_norms_sq(&self) -> &DVector<f64> {
        &self.column_norms_sq
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// `|y - A w|^2`.
    pub fn residual_sq(&self, w: &DVector<f64>) -> f64 {
        (&self.y - &self.a * w).norm_squared()
    }
}

/// The annealer's evolving state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedState {
    pub q: DMatrix<f64>,
    pub x: DVector<f64>,
    /// Column-stochasticity multipliers, cost units.
    pub mu: DVector<f64>,
    /// Structural-constraint multipliers, cost units.
    pub constraint_mu: Multipliers,
    pub t: f64,
    pub rho: f64,
}

impl RelaxedState {
    /// Uniform start `q_j = 1_d / d`, zero coefficients and multipliers, `rho = 1/T`.
    pub fn uniform(d: usize, k: usize, t: f64) -> Self {
        Self {
            q: DMatrix::from_element(d, k, 1.0 / d as f64),
            x: DVector::zeros(k),
            mu: DVector::zeros(k),
            constraint_mu: Multipliers::default(),
            t,
            rho: 1.0 / t,
        }
    }

    pub fn set_temperature(&mut self, t: f64) {
        self.t = t;
        self.rho = 1.0 / t;
    }

    /// `max_j |sum_i q_ij - 1|`.
    pub fn stochasticity_residual(&self) -> f64 {
        column_sum_residual(&self.q).amax()
    }
}

/// Final binary answer of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSolution {
    /// Binary column-stochastic selection matrix, `d × k`.
    pub v: DMatrix<f64>,
    pub x: DVector<f64>,
    /// `w = V x`.
    pub w: DVector<f64>,
    /// `|y - A w|^2`.
    pub cost: f64,
    /// `|y - A w|`.
    pub residual_norm: f64,
    pub effective_sparsity: usize,
    /// Selected features, 0-based, ascending.
    pub support: Vec<usize>,
    pub diagnostics: SolveDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// Some column's largest entry was below `1 - round_tol` at rounding.
    pub soft_rounding: bool,
    /// Temperatures whose inner loop hit the iteration cap.
    pub non_converged_temperatures: usize,
    /// Per-constraint satisfaction on the rounded `V`, in constraint order.
    pub constraints_satisfied: Vec<bool>,
    /// Two or more columns of `V` picked the same feature.
    pub duplicate_selection: bool,
    /// Argmax rounding broke a constraint and was replaced by the most likely
    /// feasible selection.
    pub repaired_rounding: bool,
    /// Annealing stopped early because the dual projection could not reach a
    /// feasible `Q`.
    pub projection_failed: bool,
}

impl SolveDiagnostics {
    pub fn all_constraints_hold(&self) -> bool {
        self.constraints_satisfied.iter().all(|&s| s)
    }

    pub fn has_warnings(&self) -> bool {
        self.soft_rounding
            || self.non_converged_temperatures > 0
            || self.repaired_rounding
            || self.projection_failed
            || !self.all_constraints_hold()
    }
}

impl SparseSolution {
    /// Assembles a solution from a binary `V` and coefficients, computing `w`, the
    /// cost and the support.
    pub fn from_selection(problem: &Problem, v: DMatrix<f64>, x: DVector<f64>) -> Result<Self> {
        if v.shape() != (problem.d(), x.len()) {
            return Err(Error::Shape(format!(
                "V is {:?} but expected ({}, {})",
                v.shape(),
                problem.d(),
                x.len()
            )));
        }
        let w = &v * &x;
        let cost = problem.residual_sq(&w);
        let support: Vec<usize> = (0..problem.d()).filter(|&i| v.row(i).sum() > 0.5).collect();
        let effective_sparsity = w.iter().filter(|v| **v != 0.0).count();
        Ok(Self {
            v,
            x,
            w,
            cost,
            residual_norm: cost.sqrt(),
            effective_sparsity,
            support,
            diagnostics: SolveDiagnostics::default(),
        })
    }
}

fn check_unit_interval(q: &DMatrix<f64>) -> Result<()> {
    for ((i, j), &v) in q.iter().enumerate().map(|(idx, v)| ((idx % q.nrows(), idx / q.nrows()), v)) {
        if !(v >= -DOMAIN_TOL && v <= 1.0 + DOMAIN_TOL) {
            return Err(Error::Domain(format!("q[{i},{j}] = {v} outside [0, 1]")));
        }
    }
    Ok(())
}

fn check_shapes(problem: &Problem, q: &DMatrix<f64>, x: &DVector<f64>) -> Result<()> {
    if q.nrows() != problem.d() || q.ncols() != x.len() {
        return Err(Error::Shape(format!(
            "Q is {}x{}, x has length {}, problem has d = {}",
            q.nrows(),
            q.ncols(),
            x.len(),
            problem.d()
        )));
    }
    Ok(())
}

#[inline]
fn xlogx(v: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else {
        v * v.ln()
    }
}

/// Shannon entropy of the factored Bernoulli distribution,
/// `-sum_ij [q ln q + (1 - q) ln(1 - q)]`, with `0 ln 0 = 0`.
pub fn entropy(q: &DMatrix<f64>) -> Result<f64> {
    check_unit_interval(q)?;
    Ok(q.iter()
        .map(|&v| {
            let v = v.clamp(0.0, 1.0);
            -(xlogx(v) + xlogx(1.0 - v))
        })
        .sum())
}

/// Expected regression cost `|y - A Q x|^2 + sum_ij (a_i^T a_i) q_ij (1 - q_ij) x_j^2`.
pub fn relaxed_cost(problem: &Problem, q: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    check_shapes(problem, q, x)?;
    let resid = problem.y() - problem.a() * (q * x);
    Ok(resid.norm_squared() + variance_term(problem, q, x))
}

fn variance_term(problem: &Problem, q: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let lam = problem.column_norms_sq();
    let mut acc = 0.0;
    for j in 0..q.ncols() {
        let xj2 = x[j] * x[j];
        for i in 0..q.nrows() {
            let v = q[(i, j)];
            acc += lam[i] * v * (1.0 - v) * xj2;
        }
    }
    acc
}

/// `Q^T 1_d - 1_k`.
pub fn column_sum_residual(q: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(q.ncols(), q.column_iter().map(|c| c.sum() - 1.0))
}

fn check_temperature(state: &RelaxedState) -> Result<()> {
    if !(state.t > 0.0) || !state.t.is_finite() {
        return Err(Error::Domain(format!("temperature {} must be positive", state.t)));
    }
    if ((state.rho * state.t) - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!(
            "penalty parameter {} is not 1/T for T = {}",
            state.rho, state.t
        )));
    }
    Ok(())
}

/// Free energy without structural constraints.
pub fn free_energy(problem: &Problem, state: &RelaxedState, c0: f64) -> Result<f64> {
    free_energy_constrained(problem, &ConstraintSet::default(), state, c0)
}

/// Free energy including the structural-constraint augmented-Lagrangian term.
pub fn free_energy_constrained(
    problem: &Problem,
    constraints: &ConstraintSet,
    state: &RelaxedState,
    c0: f64,
) -> Result<f64> {
    check_temperature(state)?;
    check_shapes(problem, &state.q, &state.x)?;
    let h = entropy(&state.q)?;
    let cost = relaxed_cost(problem, &state.q, &state.x)?;
    let g = column_sum_residual(&state.q);
    let penalty = if constraints.is_empty() {
        0.0
    } else {
        constraints
            .penalty_and_gradient(&state.q, &state.constraint_mu, state.rho)
            .0
    };
    let inner = (cost - c0) + state.mu.dot(&g) + 0.5 * state.rho * g.norm_squared() + penalty;
    Ok(h - inner / state.t)
}

/// The matrix `Xi` whose elementwise logistic image at scale `2/T` is the Gibbs
/// update of `Q`:
///
/// ```text
/// Xi = A^T (y - A Q x) x^T - 1/2 lambda_a (x o x)^T o (1 - 2Q) - 1/2 1_d mu^T
///      - 1/(2T) 1_d 1_d^T Q + 1/(2T) 1_d 1_k^T
/// ```
pub fn xi_matrix(problem: &Problem, state: &RelaxedState) -> Result<DMatrix<f64>> {
    check_shapes(problem, &state.q, &state.x)?;
    if state.mu.len() != state.q.ncols() {
        return Err(Error::Shape("multiplier length differs from k".into()));
    }
    if !(state.t > 0.0) {
        return Err(Error::Domain(format!("temperature {} must be positive", state.t)));
    }
    let mut xi = data_xi(problem, &state.q, &state.x);
    let g = column_sum_residual(&state.q);
    let inv2t = 0.5 / state.t;
    for j in 0..xi.ncols() {
        let shift = 0.5 * state.mu[j] + inv2t * g[j];
        for v in xi.column_mut(j).iter_mut() {
            *v -= shift;
        }
    }
    Ok(xi)
}

/// `Xi` with the structural-constraint gradient folded in (`-1/2 dP/dQ`).
pub fn xi_matrix_constrained(
    problem: &Problem,
    constraints: &ConstraintSet,
    state: &RelaxedState,
) -> Result<DMatrix<f64>> {
    let mut xi = xi_matrix(problem, state)?;
    if !constraints.is_empty() {
        let (_, grad) = constraints.penalty_and_gradient(&state.q, &state.constraint_mu, state.rho);
        xi -= grad * 0.5;
    }
    Ok(xi)
}

/// The data-dependent part of `Xi`: `A^T r x^T - 1/2 lambda_a (x o x)^T o (1 - 2Q)`.
pub(crate) fn data_xi(problem: &Problem, q: &DMatrix<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let resid = problem.y() - problem.a() * (q * x);
    let corr = problem.a().transpose() * resid;
    let lam = problem.column_norms_sq();
    DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| {
        corr[i] * x[j] - 0.5 * lam[i] * x[j] * x[j] * (1.0 - 2.0 * q[(i, j)])
    })
}

/// Analytic `dF_T/dx = -(1/T) dD/dx`.
pub fn grad_x(problem: &Problem, state: &RelaxedState) -> Result<DVector<f64>> {
    check_shapes(problem, &state.q, &state.x)?;
    let q = &state.q;
    let aq = problem.a() * q;
    let resid = problem.y() - &aq * &state.x;
    let lam = problem.column_norms_sq();
    let mut dd = aq.transpose() * resid * -2.0;
    for j in 0..q.ncols() {
        let s: f64 = (0..q.nrows()).map(|i| lam[i] * q[(i, j)] * (1.0 - q[(i, j)])).sum();
        dd[j] += 2.0 * s * state.x[j];
    }
    Ok(dd / -state.t)
}

/// Analytic `dF_T/dQ = (2/T) Xi - logit(Q)`, structural constraints included.
pub fn grad_q(
    problem: &Problem,
    constraints: &ConstraintSet,
    state: &RelaxedState,
) -> Result<DMatrix<f64>> {
    let xi = xi_matrix_constrained(problem, constraints, state)?;
    let scale = 2.0 / state.t;
    Ok(DMatrix::from_fn(xi.nrows(), xi.ncols(), |i, j| {
        scale * xi[(i, j)] - logit(state.q[(i, j)].clamp(EPS_CLIP, 1.0 - EPS_CLIP))
    }))
}
