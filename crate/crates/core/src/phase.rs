//! Phase-transition analysis of annealing traces.
//!
//! With `x` eliminated, the free energy becomes a function `F*(Q)` alone. Along
//! feasible perturbations `Q + C Phi` (columns summing to zero) we work with
//! `M_T(Q) = D*(Q)/2 - (T/2) H(Q)`, whose Hessian in `Phi` coordinates is
//! `J(T) = (T/2) H0 - H1`. `H0 = C^T diag(1/(q(1-q))) C` per column comes from
//! the entropy and `H1 = -1/2 d^2 D*` from the eliminated cost. The stationary
//! point stops being a minimum of `M_T` once `J` loses definiteness.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{generalized_max_eigenvalue, min_eigenvalue};
use crate::model::{data_xi, Problem};
use crate::solver::{update_x, AnnealTrace};

const RIDGE_EPS: f64 = 1e-10;
/// Base finite-difference step, scaled by the Frobenius norm of `Q`.
const FD_STEP: f64 = 1e-5;

/// Number of blocks of columns of `q` under the closure of
/// `max_i |q_ia - q_ib| <= col_tol * max|q|`.
pub fn count_distinct_columns(q: &DMatrix<f64>, col_tol: f64) -> usize {
    column_groups(q, col_tol).len()
}

/// Distinct columns of `q` among the slots whose coefficient is non-zero
/// (`|x_j| > x_tol * max|x|`), floored at one. Slots whose column is still
/// spread over many features carry near-zero coefficients and do not count.
pub fn active_distinct_columns(q: &DMatrix<f64>, x: &DVector<f64>, col_tol: f64, x_tol: f64) -> usize {
    let cut = x_tol * x.amax();
    let active: Vec<usize> = (0..x.len()).filter(|&j| x[j].abs() > cut).collect();
    if active.is_empty() {
        return 1;
    }
    count_distinct_columns(&q.select_columns(active.iter()), col_tol).max(1)
}

/// Partitions the columns of `q` into coincident groups (transitive closure of
/// max-norm distance within `col_tol * max|q|`). Groups are ordered by their
/// smallest member and list members in increasing order.
pub fn column_groups(q: &DMatrix<f64>, col_tol: f64) -> Vec<Vec<usize>> {
    let k = q.ncols();
    let tol = col_tol * q.amax();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for a in 0..k {
        for b in a + 1..k {
            if (q.column(a) - q.column(b)).amax() <= tol {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; k];
    for j in 0..k {
        let r = find(&mut parent, j);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(j);
    }
    groups
}

/// `C = [I; 0] - (1/d) 1 1^T`, a `d × (d-1)` basis of zero-sum directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBasis {
    pub c: DMatrix<f64>,
}

impl PerturbationBasis {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::Domain(format!("perturbation basis needs d >= 2, got {d}")));
        }
        let inv = 1.0 / d as f64;
        let c = DMatrix::from_fn(d, d - 1, |i, j| if i == j { 1.0 - inv } else { -inv });
        Ok(Self { c })
    }

    pub fn d(&self) -> usize {
        self.c.nrows()
    }

    pub fn dim(&self) -> usize {
        self.c.ncols()
    }
}

/// `D*(Q) = D(Q, x*(Q))` with `x*` the coefficient update.
pub fn eliminated_cost(problem: &Problem, q: &DMatrix<f64>) -> Result<f64> {
    let x = update_x(problem, q, RIDGE_EPS)?;
    crate::model::relaxed_cost(problem, q, &x)
}

/// `dD*/dQ`. By the envelope theorem this is `dD/dQ` at `x*(Q)`, i.e. `-2 Xi_data`.
pub fn eliminated_cost_gradient(problem: &Problem, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = update_x(problem, q, RIDGE_EPS)?;
    Ok(data_xi(problem, q, &x) * -2.0)
}

fn check_q(problem: &Problem, q: &DMatrix<f64>) -> Result<()> {
    if q.nrows() != problem.d() {
        return Err(Error::Shape(format!("Q has {} rows, expected {}", q.nrows(), problem.d())));
    }
    if q.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain("reduced Hessian needs Q strictly inside (0, 1)".into()));
    }
    Ok(())
}

/// `H0`: block-diagonal entropy part, `C^T diag(1/(q_j (1 - q_j))) C` per column.
pub fn entropy_hessian(basis: &PerturbationBasis, q: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = q.shape();
    let m = basis.dim();
    let mut h = DMatrix::zeros(m * k, m * k);
    for j in 0..k {
        let w = DVector::from_fn(d, |i, _| 1.0 / (q[(i, j)] * (1.0 - q[(i, j)])));
        let block = basis.c.transpose() * DMatrix::from_diagonal(&w) * &basis.c;
        h.view_mut((j * m, j * m), (m, m)).copy_from(&block);
    }
    h
}

/// `H1 = -1/2 d^2 D*` in `Phi` coordinates, by central differences of the
/// analytic gradient; symmetrized.
pub fn cost_hessian(problem: &Problem, basis: &PerturbationBasis, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, k) = q.shape();
    let m = basis.dim();
    let h = FD_STEP * q.norm().max(1.0);
    let mut out = DMatrix::zeros(m * k, m * k);
    for j in 0..k {
        for a in 0..m {
            let mut dir = DMatrix::zeros(d, k);
            dir.column_mut(j).copy_from(&basis.c.column(a));
            let gp = eliminated_cost_gradient(problem, &(q + &dir * h))?;
            let gm = eliminated_cost_gradient(problem, &(q - &dir * h))?;
            let dg = (gp - gm) / (2.0 * h);
            let col = j * m + a;
            for jj in 0..k {
                let proj = basis.c.transpose() * dg.column(jj);
                for b in 0..m {
                    out[(jj * m + b, col)] = -0.5 * proj[b];
                }
            }
        }
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// Hessian `J(T) = (T/2) H0 - H1` of `M_T` in `Phi` coordinates, size `k(d-1)`.
/// `Q` should be a fixed point of the inner loop at `T`.
pub fn reduced_hessian(problem: &Problem, q: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_q(problem, q)?;
    if !(t > 0.0) {
        return Err(Error::Domain(format!("temperature {t} must be positive")));
    }
    let basis = PerturbationBasis::new(problem.d())?;
    Ok(entropy_hessian(&basis, q) * (0.5 * t) - cost_hessian(problem, &basis, q)?)
}

/// How the per-column critical temperatures are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcrReading {
    /// `2 max_j T_j` with `T_j = 2 lambda_max(H0_j^{-1} H1_j)`.
    Theorem,
    /// `max_j T_j`.
    Block,
    /// `2 lambda_max` of the full pencil, cross-column coupling included.
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalTemperature {
    /// Per-column `2 lambda_max(H0_j^{-1} H1_j)`; `None` where `H0_j` is not
    /// positive definite.
    pub blocks: Vec<Option<f64>>,
    pub theorem: Option<f64>,
    pub block: Option<f64>,
    pub coupled: Option<f64>,
}

impl CriticalTemperature {
    pub fn reading(&self, r: TcrReading) -> Option<f64> {
        match r {
            TcrReading::Theorem => self.theorem,
            TcrReading::Block => self.block,
            TcrReading::Coupled => self.coupled,
        }
    }

    pub fn flagged_blocks(&self) -> Vec<usize> {
        self.blocks.iter().enumerate().filter(|(_, b)| b.is_none()).map(|(j, _)| j).collect()
    }
}

/// Critical temperature predicted at the fixed point `q` of temperature `t_probe`.
///
/// `J` is linear in `T` at fixed `Q`, so evaluating it at `t_probe` and
/// `2 t_probe` separates `H0` and `H1`; the pencils are then solved through a
/// Cholesky factor of `H0`.
pub fn critical_temperature(problem: &Problem, q: &DMatrix<f64>, t_probe: f64) -> Result<CriticalTemperature> {
    let j1 = reduced_hessian(problem, q, t_probe)?;
    let j2 = reduced_hessian(problem, q, 2.0 * t_probe)?;
    let h0 = (&j2 - &j1) * (2.0 / t_probe);
    let h1 = &h0 * (0.5 * t_probe) - &j1;
    Ok(pencil_temperatures(&h0, &h1, q.ncols()))
}

/// The three readings from already separated `H0` and `H1`.
pub fn pencil_temperatures(h0: &DMatrix<f64>, h1: &DMatrix<f64>, k: usize) -> CriticalTemperature {
    let m = h0.nrows() / k;
    let blocks: Vec<Option<f64>> = (0..k)
        .map(|j| {
            let b0 = h0.view((j * m, j * m), (m, m)).into_owned();
            let b1 = h1.view((j * m, j * m), (m, m)).into_owned();
            let lam = generalized_max_eigenvalue(&b1, &b0);
            if lam.is_none() {
                log::warn!("H0 block {j} is not positive definite; excluded");
            }
            lam.map(|l| 2.0 * l)
        })
        .collect();
    let block = blocks.iter().flatten().cloned().reduce(f64::max);
    let coupled = generalized_max_eigenvalue(h1, h0).map(|l| 2.0 * l);
    CriticalTemperature { theorem: block.map(|b| 2.0 * b), block, coupled, blocks }
}

/// Analytic and observed temperatures for one detected transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTemperature {
    /// Trace index of the first record with the new `k_d`.
    pub index: usize,
    pub k_d_before: usize,
    pub k_d_after: usize,
    /// Temperature of the first record with the new `k_d`.
    pub t_observed: f64,
    /// Temperature of the last record before the transition, where `Q` was probed.
    pub t_probe: f64,
    pub analytic: Option<CriticalTemperature>,
    /// Smallest eigenvalue of `J` at the probed `Q`, at `t_probe` and `t_observed`.
    pub min_eig_above: Option<f64>,
    pub min_eig_below: Option<f64>,
}

impl TransitionTemperature {
    /// The probed Hessian is positive definite above and indefinite below.
    pub fn sign_flip(&self) -> Option<bool> {
        Some(self.min_eig_above? > 0.0 && self.min_eig_below? < 0.0)
    }

    /// Whether the analytic reading lies within one cooling step of the
    /// observed transition, `[beta T_obs, T_obs / beta]`.
    pub fn within_one_step(&self, reading: TcrReading, beta: f64) -> Option<bool> {
        let t = self.analytic.as_ref()?.reading(reading)?;
        Some(t >= beta * self.t_observed * (1.0 - 1e-12) && t <= self.t_observed / beta * (1.0 + 1e-12))
    }
}

/// Analyses every transition of `trace`, probing the Hessian at the record
/// just before each one.
pub fn transition_temperatures(problem: &Problem, trace: &AnnealTrace) -> Vec<TransitionTemperature> {
    trace
        .transitions
        .iter()
        .map(|&i| {
            let before = &trace.records[i - 1];
            let after = &trace.records[i];
            let analytic = match critical_temperature(problem, &before.q, before.t) {
                Ok(c) => Some(c),
                Err(e) => {
                    log::warn!("no analytic T_cr at record {}: {e}", i - 1);
                    None
                }
            };
            let eig = |t: f64| reduced_hessian(problem, &before.q, t).ok().map(|h| min_eigenvalue(&h));
            TransitionTemperature {
                index: i,
                k_d_before: before.k_d,
                k_d_after: after.k_d,
                t_observed: after.t,
                t_probe: before.t,
                analytic,
                min_eig_above: eig(before.t),
                min_eig_below: eig(after.t),
            }
        })
        .collect()
}

/// Fractional changes of `x` within one constant-`k_d` stretch of the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub k_d: usize,
    /// First and one-past-last record index.
    pub start: usize,
    pub end: usize,
    /// `|x(n) - x_mean| / |x_mean|` for every record in the segment.
    pub delta_x: Vec<f64>,
    pub median: f64,
    pub max: f64,
    /// The segment lies between two transitions (neither the opening nor the
    /// closing stretch of the trace).
    pub interior: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionalChange {
    pub segments: Vec<SegmentStats>,
    /// `|x_after - x_before| / |x_before|` across each transition.
    pub jumps: Vec<f64>,
}

impl FractionalChange {
    /// Median of the `delta_x` values pooled over the interior segments, or
    /// over all segments when the trace has a single transition.
    pub fn intra_phase_median(&self) -> f64 {
        let any_interior = self.segments.iter().any(|s| s.interior);
        let all: Vec<f64> = self
            .segments
            .iter()
            .filter(|s| s.interior || !any_interior)
            .flat_map(|s| s.delta_x.iter().cloned())
            .collect();
        median(&all)
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Boundaries of the constant-`k_d` stretches: `(start, end, k_d)`.
fn segments(trace: &AnnealTrace) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let recs = &trace.records;
    let mut start = 0;
    for i in 1..=recs.len() {
        if i == recs.len() || recs[i].k_d != recs[start].k_d {
            out.push((start, i, recs[start].k_d));
            start = i;
        }
    }
    out
}

pub fn fractional_change_stats(trace: &AnnealTrace) -> Result<FractionalChange> {
    if trace.transitions.is_empty() {
        return Err(Error::Domain("trace has no phase transition".into()));
    }
    let recs = &trace.records;
    let mut out = Vec::new();
    for (start, end, k_d) in segments(trace) {
        let interior = start > 0 && end < recs.len();
        let xs = &recs[start..end];
        let mut mean = DVector::zeros(xs[0].x.len());
        for r in xs {
            mean += &r.x;
        }
        mean /= xs.len() as f64;
        let norm = mean.norm();
        if norm == 0.0 {
            continue;
        }
        let delta_x: Vec<f64> = xs.iter().map(|r| (&r.x - &mean).norm() / norm).collect();
        let max = delta_x.iter().cloned().fold(0.0, f64::max);
        out.push(SegmentStats { k_d, start, end, median: median(&delta_x), max, delta_x, interior });
    }
    let jumps = trace
        .transitions
        .iter()
        .map(|&i| {
            let (a, b) = (&recs[i - 1].x, &recs[i].x);
            (b - a).norm() / a.norm().max(f64::MIN_POSITIVE)
        })
        .collect();
    Ok(FractionalChange { segments: out, jumps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceEstimate {
    pub k_hat: usize,
    /// No interior plateau existed; `k_hat` fell back to `k`.
    pub low_confidence: bool,
    /// Total `log(1/T)` length spent at each interior `k_d`, ascending in `k_d`.
    pub dwell: Vec<(usize, f64)>,
}

/// The interior `k_d` with the longest total `log(1/T)` dwell. The opening
/// `k_d = 1` stretch and a closing `k_d = k` stretch are excluded because their
/// lengths depend only on `T_max` and `T_min`.
pub fn persistence_estimate(trace: &AnnealTrace, k: usize) -> PersistenceEstimate {
    let recs = &trace.records;
    let segs = segments(trace);
    let mut dwell: Vec<(usize, f64)> = Vec::new();
    for (idx, &(start, end, k_d)) in segs.iter().enumerate() {
        if k_d == 1 && idx == 0 {
            continue;
        }
        if k_d == k && idx + 1 == segs.len() {
            continue;
        }
        // the stretch lasts until the next stretch begins
        let t_end = if end < recs.len() { recs[end].t } else { recs[end - 1].t };
        let len = (recs[start].t / t_end).ln();
        match dwell.iter_mut().find(|(kd, _)| *kd == k_d) {
            Some(entry) => entry.1 += len,
            None => dwell.push((k_d, len)),
        }
    }
    dwell.sort_by_key(|(kd, _)| *kd);
    let best = dwell
        .iter()
        .filter(|(_, len)| *len > 0.0)
        .fold(None, |acc: Option<(usize, f64)>, &(kd, len)| match acc {
            Some((_, b)) if b >= len => acc,
            _ => Some((kd, len)),
        });
    match best {
        Some((k_hat, _)) => PersistenceEstimate { k_hat, low_confidence: false, dwell },
        None => PersistenceEstimate { k_hat: k, low_confidence: true, dwell },
    }
}

/// Everything the phase analysis extracts from one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub transitions: Vec<TransitionTemperature>,
    pub fractional_change: Option<FractionalChange>,
    pub persistence: PersistenceEstimate,
}

/// Builds the report; `analytic = false` skips the Hessian work.
pub fn analyze(problem: &Problem, trace: &AnnealTrace, analytic: bool) -> TransitionReport {
    let transitions = if analytic {
        transition_temperatures(problem, trace)
    } else {
        trace
            .transitions
            .iter()
            .map(|&i| TransitionTemperature {
                index: i,
                k_d_before: trace.records[i - 1].k_d,
                k_d_after: trace.records[i].k_d,
                t_observed: trace.records[i].t,
                t_probe: trace.records[i - 1].t,
                analytic: None,
                min_eig_above: None,
                min_eig_below: None,
            })
            .collect()
    };
    TransitionReport {
        transitions,
        fractional_change: fractional_change_stats(trace).ok(),
        persistence: persistence_estimate(trace, problem.k()),
    }
}

/// `log(1/T),k_d` rows for plotting.
pub fn k_d_csv(trace: &AnnealTrace) -> String {
    let mut out = String::from("log_inv_t,k_d\n");
    for r in &trace.records {
        out.push_str(&format!("{:?},{}\n", (1.0 / r.t).ln(), r.k_d));
    }
    out
}

/// `segment,k_d,median,max` rows for plotting.
pub fn fractional_change_csv(stats: &FractionalChange) -> String {
    let mut out = String::from("segment,k_d,median_delta_x,max_delta_x\n");
    for (i, s) in stats.segments.iter().enumerate() {
        out.push_str(&format!("{i},{},{:?},{:?}\n", s.k_d, s.median, s.max));
    }
    out
}
