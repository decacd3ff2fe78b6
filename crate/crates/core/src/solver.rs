//! Deterministic annealing of the relaxed selection problem.
//!
//! At each temperature the solver alternates the closed-form coefficient update
//! and a damped Gibbs update of `Q`. The Gibbs update is computed in logit space
//! and then projected onto column-stochastic matrices that satisfy the
//! structural constraints by solving for the dual shifts exactly; those shifts
//! are the multipliers `mu` (and the constraint multipliers) expressed in logit
//! units, and are written back to the state in cost units.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{row_sums, ConstraintSet, Multipliers};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, logit, sigmoid, solve_symmetric};
use crate::model::{
    column_sum_residual, data_xi, relaxed_cost, xi_matrix_constrained, Problem, RelaxedState, SparseSolution,
    EPS_CLIP,
};
use crate::phase::{active_distinct_columns, column_groups};

const COND_LIMIT: f64 = 1e12;
const PROJECTION_TOL: f64 = 1e-12;
const PROJECTION_ITERS: usize = 200;
/// Largest change of a structural shift, in logit units, per Newton step.
const MAX_DUAL_STEP: f64 = 8.0;
/// Dual residual above which a projection counts as failed.
const PROJECTION_FAIL_TOL: f64 = 1e-6;
/// Search-node budget of the feasible rounding repair.
const REPAIR_NODE_CAP: usize = 2_000_000;
const MIN_DAMPING: f64 = 1.0 / 64.0;
const UNIFORM_TOL: f64 = 1e-4;
const TMAX_DOUBLINGS: u32 = 60;

/// Starting temperature: either fixed or found by [`auto_tmax`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StartTemperature {
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for StartTemperature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .map(Self::Fixed)
            .map_err(|_| Error::Config(format!("T_max must be 'auto' or a number, got '{s}'")))
    }
}

impl Serialize for StartTemperature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Fixed(t) => s.serialize_f64(*t),
        }
    }
}

impl<'de> Deserialize<'de> for StartTemperature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(t) => Ok(Self::Fixed(t)),
            Repr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    pub t_max: StartTemperature,
    /// Lowest temperature visited; `None` means `T_max * beta^500`.
    pub t_min: Option<f64>,
    pub beta: f64,
    pub inner_max_iters: usize,
    pub inner_tol: f64,
    pub damping: f64,
    pub ridge_eps: f64,
    pub tol_stoch: f64,
    /// Annealing stops once every entry of `Q` is this close to 0 or 1.
    pub round_tol: f64,
    pub seed: u64,
    /// Standard deviation of the logit noise applied at each new temperature to
    /// one member of every group of coincident columns. Identical columns of
    /// `Q` are a fixed point of the updates, so without it the slots never
    /// separate.
    pub perturbation: f64,
    /// Distinct-column tolerance used for the `k_d` trace.
    pub col_tol: f64,
    /// Coefficients below `x_tol * max|x|` count as zero when computing `k_d`.
    pub x_tol: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            t_max: StartTemperature::Auto,
            t_min: None,
            beta: 0.95,
            inner_max_iters: 2000,
            inner_tol: 1e-8,
            damping: 0.5,
            ridge_eps: 1e-10,
            tol_stoch: 1e-8,
            round_tol: 1e-3,
            seed: 0,
            perturbation: 0.03,
            col_tol: 1e-3,
            x_tol: 1e-2,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta = {} must lie in (0, 1)", self.beta));
        }
        if let StartTemperature::Fixed(t) = self.t_max {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("T_max = {t} must be positive"));
            }
            if let Some(lo) = self.t_min {
                if lo >= t {
                    return bad(format!("T_min = {lo} must be below T_max = {t}"));
                }
            }
        }
        if let Some(lo) = self.t_min {
            if !(lo > 0.0) {
                return bad(format!("T_min = {lo} must be positive"));
            }
        }
        if self.inner_max_iters == 0 {
            return bad("inner_max_iters must be at least 1".into());
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping = {} must lie in (0, 1]", self.damping));
        }
        for (name, v) in [
            ("inner_tol", self.inner_tol),
            ("ridge_eps", self.ridge_eps),
            ("tol_stoch", self.tol_stoch),
            ("round_tol", self.round_tol),
            ("col_tol", self.col_tol),
            ("x_tol", self.x_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.perturbation >= 0.0 && self.perturbation.is_finite()) {
            return bad(format!("perturbation = {} must be non-negative", self.perturbation));
        }
        Ok(())
    }
}

/// One temperature of the annealing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub q: DMatrix<f64>,
    pub x: DVector<f64>,
    pub relaxed_cost: f64,
    /// Squared residual of the least-squares refit on the argmax selection of `Q`.
    pub rounded_cost: f64,
    pub k_d: usize,
    pub stochasticity_residual: f64,
    pub inner_iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnealTrace {
    pub records: Vec<TraceRecord>,
    /// Record indices at which `k_d` increased.
    pub transitions: Vec<usize>,
}

impl AnnealTrace {
    pub fn push(&mut self, record: TraceRecord) {
        if let Some(prev) = self.records.last() {
            if record.k_d > prev.k_d {
                self.transitions.push(self.records.len());
            }
        }
        self.records.push(record);
    }

    pub fn k_d_sequence(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.k_d).collect()
    }
}

/// Outcome of [`inner_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub state: RelaxedState,
    pub iterations: usize,
    pub converged: bool,
    /// The dual projection failed; `state` holds the last feasible iterate.
    pub projection_failed: bool,
}

/// Closed-form coefficient update
/// `x = [Q^T A^T A Q + diag(lambda_a^T (Q o (1 - Q)))]^{-1} Q^T A^T y`,
/// with `ridge_eps * I` added only when the system is numerically singular.
pub fn update_x(problem: &Problem, q: &DMatrix<f64>, ridge_eps: f64) -> Result<DVector<f64>> {
    if q.nrows() != problem.d() {
        return Err(Error::Shape(format!("Q has {} rows, expected {}", q.nrows(), problem.d())));
    }
    let aq = problem.a() * q;
    let mut m = aq.transpose() * &aq;
    let lam = problem.column_norms_sq();
    for j in 0..q.ncols() {
        m[(j, j)] += (0..q.nrows()).map(|i| lam[i] * q[(i, j)] * (1.0 - q[(i, j)])).sum::<f64>();
    }
    let rhs = aq.transpose() * problem.y();
    Ok(solve_symmetric(&m, &rhs, ridge_eps, COND_LIMIT)?.0)
}

/// Elementwise Gibbs map `sigmoid((2/T) Xi)` at the state's current multipliers,
/// clamped to `[EPS_CLIP, 1 - EPS_CLIP]`.
pub fn gibbs_update_q(problem: &Problem, state: &RelaxedState) -> Result<DMatrix<f64>> {
    gibbs_update_q_constrained(problem, &ConstraintSet::default(), state)
}

pub fn gibbs_update_q_constrained(
    problem: &Problem,
    constraints: &ConstraintSet,
    state: &RelaxedState,
) -> Result<DMatrix<f64>> {
    if !(state.t > 0.0) {
        return Err(Error::Domain(format!("temperature {} must be positive", state.t)));
    }
    let xi = xi_matrix_constrained(problem, constraints, state)?;
    let scale = 2.0 / state.t;
    let mut out = DMatrix::zeros(xi.nrows(), xi.ncols());
    for j in 0..xi.ncols() {
        for i in 0..xi.nrows() {
            let z = scale * xi[(i, j)];
            if !z.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
            out[(i, j)] = sigmoid(z).clamp(EPS_CLIP, 1.0 - EPS_CLIP);
        }
    }
    Ok(out)
}

/// Eq. of the column-stochasticity multiplier step, `mu + rho (Q^T 1 - 1)`.
pub fn update_multiplier(mu: &DVector<f64>, rho: f64, q: &DMatrix<f64>) -> DVector<f64> {
    mu + column_sum_residual(q) * rho
}

/// Dual shifts, in logit units, that make `sigmoid(Z - shifts)` feasible.
#[derive(Debug, Clone, PartialEq)]
struct Shifts {
    column: Vec<f64>,
    rows: Vec<f64>,
}

impl Shifts {
    fn zeros(k: usize, rows: usize) -> Self {
        Self { column: vec![0.0; k], rows: vec![0.0; rows] }
    }
}

/// Per-feature logit offset implied by the structural shifts.
fn row_offsets(constraints: &ConstraintSet, nu: &[f64], d: usize) -> Vec<f64> {
    let mut off = vec![0.0; d];
    for (row, &v) in constraints.rows().iter().zip(nu) {
        if v != 0.0 {
            for &(i, c) in &row.coefficients {
                off[i] += v * row.orientation() * c;
            }
        }
    }
    off
}

/// Root of a non-increasing scalar function `f` (returning value and slope),
/// starting from `x0`. Safeguarded Newton inside an expanding bracket.
fn decreasing_root(f: impl Fn(f64) -> (f64, f64), x0: f64, tol: f64) -> f64 {
    let (f0, _) = f(x0);
    if f0.abs() <= tol {
        return x0;
    }
    // bracket: f(lo) > 0 > f(hi)
    let (mut lo, mut hi);
    let mut step = 1.0;
    if f0 > 0.0 {
        lo = x0;
        hi = x0 + step;
        while f(hi).0 > 0.0 {
            lo = hi;
            step *= 2.0;
            hi = x0 + step;
            if step > 1e300 {
                return hi;
            }
        }
    } else {
        hi = x0;
        lo = x0 - step;
        while f(lo).0 < 0.0 {
            hi = lo;
            step *= 2.0;
            lo = x0 - step;
            if step > 1e300 {
                return lo;
            }
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (v, slope) = f(x);
        if v.abs() <= tol {
            return x;
        }
        if v > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = if slope < 0.0 { x - v / slope } else { f64::NAN };
        x = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * (1.0 + x.abs()) {
            return x;
        }
    }
    x
}

/// Finds shifts such that `Q = sigmoid(Z - column shift - row offsets)` is
/// column-stochastic and satisfies `constraints`, warm-started from `shifts`.
/// Also returns the remaining dual residual.
///
/// The shifts minimize the convex dual
/// `L = sum_ij softplus(Z_ij - s_j - off_i(nu)) + sum_j s_j + sum_c nu_c o_c b_c`
/// with `nu_c >= 0` on inequality rows. Without structural rows the columns
/// decouple into scalar root problems.
fn project_logits(z: &DMatrix<f64>, constraints: &ConstraintSet, shifts: &mut Shifts) -> (DMatrix<f64>, f64) {
    let (d, k) = z.shape();
    let mut residual = 0.0;
    if constraints.rows().is_empty() {
        for j in 0..k {
            let col = |s: f64| {
                let mut v = -1.0;
                let mut slope = 0.0;
                for i in 0..d {
                    let p = sigmoid(z[(i, j)] - s);
                    v += p;
                    slope -= p * (1.0 - p);
                }
                (v, slope)
            };
            shifts.column[j] = decreasing_root(col, shifts.column[j], PROJECTION_TOL * 0.1);
        }
    } else {
        residual = DualProblem::new(z, constraints).solve(shifts);
    }
    let off = row_offsets(constraints, &shifts.rows, d);
    let q = DMatrix::from_fn(d, k, |i, j| {
        sigmoid(z[(i, j)] - shifts.column[j] - off[i]).clamp(EPS_CLIP, 1.0 - EPS_CLIP)
    });
    (q, residual)
}

struct DualProblem<'a> {
    z: &'a DMatrix<f64>,
    /// `o_c a_ci`, one dense row per structural row.
    coef: Vec<Vec<f64>>,
    /// `o_c b_c`.
    rhs: Vec<f64>,
    equality: Vec<bool>,
}

/// State of the structural dual with the column shifts eliminated.
struct DualPoint {
    nu: Vec<f64>,
    s: Vec<f64>,
    /// `dphi/dnu_c = -value_c`.
    grad: Vec<f64>,
}

impl<'a> DualProblem<'a> {
    fn new(z: &'a DMatrix<f64>, constraints: &ConstraintSet) -> Self {
        let d = z.nrows();
        let mut coef = Vec::new();
        let mut rhs = Vec::new();
        let mut equality = Vec::new();
        for row in constraints.rows() {
            let mut c = vec![0.0; d];
            for &(i, a) in &row.coefficients {
                c[i] += row.orientation() * a;
            }
            coef.push(c);
            rhs.push(row.orientation() * row.bound);
            equality.push(row.is_equality());
        }
        Self { z, coef, rhs, equality }
    }

    fn offsets(&self, nu: &[f64]) -> Vec<f64> {
        (0..self.z.nrows())
            .map(|i| self.coef.iter().zip(nu).map(|(c, v)| c[i] * v).sum())
            .collect()
    }

    /// Solves every column shift exactly for fixed `nu`.
    fn eliminate(&self, nu: Vec<f64>, warm: &[f64]) -> DualPoint {
        let (d, k) = self.z.shape();
        let off = self.offsets(&nu);
        let mut s = warm.to_vec();
        let mut row_p = vec![0.0; d];
        for j in 0..k {
            let col = |sh: f64| {
                let mut v = -1.0;
                let mut slope = 0.0;
                for i in 0..d {
                    let p = sigmoid(self.z[(i, j)] - off[i] - sh);
                    v += p;
                    slope -= p * (1.0 - p);
                }
                (v, slope)
            };
            s[j] = decreasing_root(col, s[j], PROJECTION_TOL * 0.1);
            for i in 0..d {
                row_p[i] += sigmoid(self.z[(i, j)] - off[i] - s[j]);
            }
        }
        let grad = self
            .coef
            .iter()
            .zip(&self.rhs)
            .map(|(c, b)| b - (0..d).map(|i| c[i] * row_p[i]).sum::<f64>())
            .collect();
        DualPoint { nu, s, grad }
    }

    fn free_mask(&self, pt: &DualPoint) -> Vec<bool> {
        (0..pt.nu.len())
            .map(|c| self.equality[c] || pt.nu[c] > 0.0 || pt.grad[c] <= 0.0)
            .collect()
    }

    fn merit(&self, pt: &DualPoint) -> f64 {
        let free = self.free_mask(pt);
        pt.grad.iter().zip(&free).filter(|(_, f)| **f).map(|(g, _)| g.abs()).fold(0.0, f64::max)
    }

    /// Hessian of the reduced dual: the `nu` block minus the column coupling.
    fn reduced_hessian(&self, pt: &DualPoint) -> DMatrix<f64> {
        let (d, k) = self.z.shape();
        let m = pt.nu.len();
        let off = self.offsets(&pt.nu);
        let mut h = DMatrix::zeros(m, m);
        for j in 0..k {
            let w: Vec<f64> = (0..d)
                .map(|i| {
                    let p = sigmoid(self.z[(i, j)] - off[i] - pt.s[j]);
                    p * (1.0 - p)
                })
                .collect();
            let hjj: f64 = w.iter().sum();
            let cross: Vec<f64> = self.coef.iter().map(|c| (0..d).map(|i| c[i] * w[i]).sum()).collect();
            for a in 0..m {
                for b in 0..m {
                    let direct: f64 = (0..d).map(|i| self.coef[a][i] * self.coef[b][i] * w[i]).sum();
                    h[(a, b)] += direct;
                    if hjj > 0.0 {
                        h[(a, b)] -= cross[a] * cross[b] / hjj;
                    }
                }
            }
        }
        h
    }

    fn solve(&self, shifts: &mut Shifts) -> f64 {
        let nu0: Vec<f64> = shifts
            .rows
            .iter()
            .zip(&self.equality)
            .map(|(&v, &eq)| if eq { v } else { v.max(0.0) })
            .collect();
        let mut pt = self.eliminate(nu0, &shifts.column);
        let mut merit = self.merit(&pt);
        for _ in 0..PROJECTION_ITERS {
            if merit <= PROJECTION_TOL {
                break;
            }
            let free: Vec<usize> = self.free_mask(&pt).iter().enumerate().filter(|(_, f)| **f).map(|(c, _)| c).collect();
            let h = self.reduced_hessian(&pt);
            let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&c| -pt.grad[c]));
            let scale = hf.diagonal().amax().max(1e-300);
            let mut reg = 1e-12 * scale;
            let step = loop {
                let sys = &hf + DMatrix::identity(free.len(), free.len()) * reg;
                if let Some(ch) = sys.cholesky() {
                    break ch.solve(&gf);
                }
                reg = (reg * 100.0).max(1e-300);
            };
            let mut alpha = (MAX_DUAL_STEP / step.amax().max(1e-300)).min(1.0);
            let mut next = None;
            while alpha > 1e-10 {
                let mut nu = pt.nu.clone();
                for (a, &c) in free.iter().enumerate() {
                    nu[c] += alpha * step[a];
                    if !self.equality[c] {
                        nu[c] = nu[c].max(0.0);
                    }
                }
                let cand = self.eliminate(nu, &pt.s);
                let m = self.merit(&cand);
                if m < merit {
                    next = Some((cand, m));
                    break;
                }
                alpha *= 0.5;
            }
            match next {
                Some((cand, m)) => {
                    pt = cand;
                    merit = m;
                }
                None => break,
            }
        }
        shifts.column = pt.s;
        shifts.rows = pt.nu;
        merit
    }
}

fn logits_of(problem: &Problem, q: &DMatrix<f64>, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
    let z = data_xi(problem, q, x) * (2.0 / t);
    if let Some(idx) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: idx % q.nrows(), col: idx / q.nrows() });
    }
    Ok(z)
}

fn write_multipliers(state: &mut RelaxedState, shifts: &Shifts) {
    state.mu = DVector::from_iterator(shifts.column.len(), shifts.column.iter().map(|s| s * state.t));
    state.constraint_mu = Multipliers(shifts.rows.iter().map(|s| s * state.t).collect());
}

fn read_shifts(state: &RelaxedState, n_rows: usize) -> Shifts {
    let mut s = Shifts::zeros(state.q.ncols(), n_rows);
    if state.mu.len() == s.column.len() {
        for (dst, m) in s.column.iter_mut().zip(state.mu.iter()) {
            *dst = m / state.t;
        }
    }
    for (idx, dst) in s.rows.iter_mut().enumerate() {
        *dst = state.constraint_mu.get(idx) / state.t;
    }
    s
}

/// The Gibbs update of `Q` with multipliers chosen so the result is exactly
/// feasible. Updates the state's multipliers to the values that make the
/// returned matrix a fixed point of [`gibbs_update_q_constrained`], and returns
/// the dual residual (max violated row or column sum) alongside.
pub fn projected_gibbs_update(
    problem: &Problem,
    constraints: &ConstraintSet,
    state: &mut RelaxedState,
) -> Result<(DMatrix<f64>, f64)> {
    let z = logits_of(problem, &state.q, &state.x, state.t)?;
    let mut shifts = read_shifts(state, constraints.rows().len());
    let (q, residual) = project_logits(&z, constraints, &mut shifts);
    write_multipliers(state, &shifts);
    Ok((q, residual))
}

/// Alternates the coefficient update and the damped Gibbs update at fixed `T`
/// until the `Q` step falls below `inner_tol` in max-norm.
pub fn inner_solve(
    problem: &Problem,
    constraints: &ConstraintSet,
    state: RelaxedState,
    config: &AnnealConfig,
) -> Result<InnerResult> {
    let mut state = state;
    let mut converged = false;
    let mut projection_failed = false;
    let mut iterations = 0;
    let mut damping = config.damping;
    let mut prev_step = f64::INFINITY;
    while iterations < config.inner_max_iters {
        iterations += 1;
        state.x = update_x(problem, &state.q, config.ridge_eps)?;
        let saved = (state.mu.clone(), state.constraint_mu.clone());
        let (target, residual) = projected_gibbs_update(problem, constraints, &mut state)?;
        if residual > PROJECTION_FAIL_TOL {
            (state.mu, state.constraint_mu) = saved;
            projection_failed = true;
            break;
        }
        let step = (&target - &state.q).amax();
        // a growing step means the map overshoots: halve the damping
        if step > prev_step && damping > MIN_DAMPING {
            damping = (damping * 0.5).max(MIN_DAMPING);
        }
        prev_step = step;
        state.q = if damping >= 1.0 {
            target
        } else {
            &state.q * (1.0 - damping) + target * damping
        };
        if step <= config.inner_tol {
            converged = true;
            break;
        }
    }
    state.x = update_x(problem, &state.q, config.ridge_eps)?;
    Ok(InnerResult { state, iterations, converged, projection_failed })
}

/// Per column, a one at the argmax row (lowest index on ties), zeros elsewhere.
/// The flag reports whether any column's maximum fell below `1 - round_tol`.
pub fn round_to_binary(q: &DMatrix<f64>, round_tol: f64) -> (DMatrix<f64>, bool) {
    let mut v = DMatrix::zeros(q.nrows(), q.ncols());
    let mut soft = false;
    for j in 0..q.ncols() {
        let mut best = 0;
        for i in 1..q.nrows() {
            if q[(i, j)] > q[(best, j)] {
                best = i;
            }
        }
        v[(best, j)] = 1.0;
        soft |= q[(best, j)] < 1.0 - round_tol;
    }
    (v, soft)
}

/// Most likely binary selection under `q` (maximal `sum log q` over the picked
/// entries) that uses distinct features and satisfies `constraints`.
/// Depth-first branch and bound over the columns; `None` if nothing feasible
/// turns up within the node budget.
pub fn feasible_rounding(q: &DMatrix<f64>, constraints: &ConstraintSet) -> Option<DMatrix<f64>> {
    let (d, k) = q.shape();
    let logq = q.map(|v| v.clamp(EPS_CLIP, 1.0).ln());
    let order: Vec<Vec<usize>> = (0..k)
        .map(|j| {
            let mut rows: Vec<usize> = (0..d).collect();
            rows.sort_by(|&a, &b| logq[(b, j)].total_cmp(&logq[(a, j)]).then(a.cmp(&b)));
            rows
        })
        .collect();
    // optimistic completion score from column j onwards
    let mut tail = vec![0.0; k + 1];
    for j in (0..k).rev() {
        tail[j] = tail[j + 1] + logq[(order[j][0], j)];
    }

    struct Search<'a> {
        logq: &'a DMatrix<f64>,
        order: &'a [Vec<usize>],
        tail: &'a [f64],
        constraints: &'a ConstraintSet,
        picks: Vec<usize>,
        used: Vec<bool>,
        best: Option<(f64, Vec<usize>)>,
        nodes: usize,
    }

    impl Search<'_> {
        fn visit(&mut self, j: usize, score: f64) {
            self.nodes += 1;
            if self.nodes > REPAIR_NODE_CAP {
                return;
            }
            if let Some((b, _)) = &self.best {
                if score + self.tail[j] <= *b {
                    return;
                }
            }
            let k = self.order.len();
            if j == k {
                let mut sums = vec![0.0; self.used.len()];
                for &i in &self.picks {
                    sums[i] += 1.0;
                }
                if self.constraints.rows().iter().all(|r| r.holds(&sums, 1e-9)) {
                    self.best = Some((score, self.picks.clone()));
                }
                return;
            }
            for idx in 0..self.order[j].len() {
                let i = self.order[j][idx];
                if self.used[i] {
                    continue;
                }
                self.used[i] = true;
                self.picks.push(i);
                self.visit(j + 1, score + self.logq[(i, j)]);
                self.picks.pop();
                self.used[i] = false;
            }
        }
    }

    let mut search = Search {
        logq: &logq,
        order: &order,
        tail: &tail,
        constraints,
        picks: Vec::with_capacity(k),
        used: vec![false; d],
        best: None,
        nodes: 0,
    };
    search.visit(0, 0.0);
    search.best.map(|(_, picks)| {
        let mut v = DMatrix::zeros(d, k);
        for (j, i) in picks.into_iter().enumerate() {
            v[(i, j)] = 1.0;
        }
        v
    })
}

/// Least-squares refit on the features selected by `v`. A feature picked by more
/// than one column carries its coefficient in the first such column only.
pub fn refit(problem: &Problem, v: &DMatrix<f64>) -> DVector<f64> {
    let picks: Vec<usize> = (0..v.ncols()).map(|j| v.column(j).imax()).collect();
    let mut distinct = picks.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let (coef, _) = least_squares(problem.a(), problem.y(), &distinct);
    let mut x = DVector::zeros(v.ncols());
    let mut used = vec![false; problem.d()];
    for (j, &i) in picks.iter().enumerate() {
        if !used[i] {
            used[i] = true;
            let pos = distinct.binary_search(&i).expect("pick is in the distinct set");
            x[j] = coef[pos];
        }
    }
    x
}

fn is_binary(q: &DMatrix<f64>, tol: f64) -> bool {
    q.iter().all(|&v| v <= tol || v >= 1.0 - tol)
}

/// Smallest temperature, doubling from `4 max_j |a_j|^2 |y|^2`, at which the
/// unconstrained fixed point is uniform to within `1e-4`.
pub fn auto_tmax(problem: &Problem) -> Result<f64> {
    let config = AnnealConfig::default();
    let lam_max = problem.column_norms_sq().max();
    let mut t = 4.0 * lam_max * problem.y().norm_squared();
    if !(t > 0.0) {
        t = 1.0;
    }
    let uniform = 1.0 / problem.d() as f64;
    for _ in 0..=TMAX_DOUBLINGS {
        let state = RelaxedState::uniform(problem.d(), problem.k(), t);
        let out = inner_solve(problem, &ConstraintSet::default(), state, &config)?;
        if out.state.q.iter().all(|v| (v - uniform).abs() <= UNIFORM_TOL) {
            return Ok(t);
        }
        t *= 2.0;
    }
    Err(Error::Config(format!(
        "no uniform fixed point below T = {t:.3e}; check the scaling of A and y"
    )))
}

/// Nudges the logits of the last member of every coincident column group, so a
/// group can only shed one column at a time when it loses stability.
fn perturb(
    constraints: &ConstraintSet,
    state: &mut RelaxedState,
    eps: f64,
    col_tol: f64,
    rng: &mut ChaCha8Rng,
) {
    let mut z = state.q.map(|v| logit(v.clamp(EPS_CLIP, 1.0 - EPS_CLIP)));
    let mut touched = false;
    for group in column_groups(&state.q, col_tol) {
        if group.len() < 2 {
            continue;
        }
        let j = *group.last().unwrap();
        for i in 0..z.nrows() {
            z[(i, j)] += eps * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
        touched = true;
    }
    if !touched {
        return;
    }
    let mut shifts = Shifts::zeros(state.q.ncols(), constraints.rows().len());
    let (q, residual) = project_logits(&z, constraints, &mut shifts);
    if residual <= PROJECTION_FAIL_TOL {
        state.q = q;
    }
}

/// Outer annealing loop: solve at each temperature, record, step the
/// multipliers, cool geometrically, and round once `Q` is binary or `T` drops
/// below `T_min`.
pub fn anneal(
    problem: &Problem,
    constraints: &ConstraintSet,
    config: &AnnealConfig,
) -> Result<(SparseSolution, AnnealTrace)> {
    config.validate()?;
    constraints.check(problem.k(), problem.d())?;

    let t_max = match config.t_max {
        StartTemperature::Fixed(t) => t,
        StartTemperature::Auto => auto_tmax(problem)?,
    };
    let t_min = config.t_min.unwrap_or(t_max * config.beta.powi(500));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut state = RelaxedState::uniform(problem.d(), problem.k(), t_max);
    state.constraint_mu = Multipliers::zeros(constraints.rows().len());
    let mut trace = AnnealTrace::default();
    let mut non_converged = 0;
    let mut projection_failed = false;

    loop {
        if config.perturbation > 0.0 {
            perturb(constraints, &mut state, config.perturbation, config.col_tol, &mut rng);
        }
        let out = inner_solve(problem, constraints, state, config)?;
        state = out.state;
        projection_failed |= out.projection_failed;
        if !out.converged {
            non_converged += 1;
            log::debug!("inner loop hit the iteration cap at T = {:.4e}", state.t);
        }

        let (v, _) = round_to_binary(&state.q, config.round_tol);
        let xr = refit(problem, &v);
        let record = TraceRecord {
            t: state.t,
            q: state.q.clone(),
            x: state.x.clone(),
            relaxed_cost: relaxed_cost(problem, &state.q, &state.x)?,
            rounded_cost: problem.residual_sq(&(&v * &xr)),
            k_d: active_distinct_columns(&state.q, &state.x, config.col_tol, config.x_tol),
            stochasticity_residual: state.stochasticity_residual(),
            inner_iterations: out.iterations,
            converged: out.converged,
        };
        log::trace!("T = {:.4e}  k_d = {}  D = {:.6}", record.t, record.k_d, record.relaxed_cost);
        trace.push(record);

        state.mu = update_multiplier(&state.mu, state.rho, &state.q);
        state.constraint_mu = constraints.update_multipliers(&state.q, &state.constraint_mu, state.rho);

        if projection_failed {
            log::warn!("dual projection failed at T = {:.4e}; stopping", state.t);
            break;
        }
        if is_binary(&state.q, config.round_tol) {
            break;
        }
        let next = state.t * config.beta;
        if next < t_min {
            break;
        }
        // Structural shifts can grow without bound along directions where the
        // feasible set has no interior; carry them over in logit units so the
        // warm start does not inflate them by 1/beta at every step.
        for v in state.constraint_mu.0.iter_mut() {
            *v *= config.beta;
        }
        state.set_temperature(next);
    }

    let (mut v, soft) = round_to_binary(&state.q, config.round_tol);
    let mut repaired = false;
    if !constraints.satisfaction(&v).iter().all(|&ok| ok) {
        if let Some(alt) = feasible_rounding(&state.q, constraints) {
            log::warn!("argmax rounding violates a constraint; using the most likely feasible selection");
            v = alt;
            repaired = true;
        }
    }
    let x = refit(problem, &v);
    let mut solution = SparseSolution::from_selection(problem, v, x)?;
    solution.diagnostics.soft_rounding = soft;
    solution.diagnostics.repaired_rounding = repaired;
    solution.diagnostics.projection_failed = projection_failed;
    solution.diagnostics.non_converged_temperatures = non_converged;
    solution.diagnostics.constraints_satisfied = constraints.satisfaction(&solution.v);
    solution.diagnostics.duplicate_selection = {
        let sums = row_sums(&solution.v);
        sums.iter().any(|&s| s > 1.5)
    };
    Ok((solution, trace))
}
