//! Reference solvers: exhaustive best-subset enumeration and orthogonal
//! matching pursuit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::model::{Problem, SparseSolution};

/// Default refusal threshold for [`exhaustive_best_subset`].
pub const ENUMERATION_CAP: u128 = 2_000_000;

/// Best subset found by enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Selected features, 0-based, ascending.
    pub support: Vec<usize>,
    /// Least-squares coefficients aligned with `support`.
    pub coefficients: Vec<f64>,
    /// `|y - A_S x_S|^2`.
    pub cost: f64,
    pub subsets_evaluated: u64,
}

impl OracleResult {
    pub fn residual_norm(&self) -> f64 {
        self.cost.sqrt()
    }

    /// `w` with the coefficients scattered into the support.
    pub fn w(&self, d: usize) -> DVector<f64> {
        let mut w = DVector::zeros(d);
        for (&i, &c) in self.support.iter().zip(&self.coefficients) {
            w[i] = c;
        }
        w
    }
}

fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    (0..r).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of non-empty subsets of size at most `k` drawn from `d` features.
pub fn subset_count(d: usize, k: usize) -> u128 {
    (1..=k.min(d)).map(|s| binomial(d, s)).sum()
}

/// Exact minimizer of `|y - A w|^2` subject to `|w|_0 <= k` and the
/// constraints, with the default enumeration cap.
pub fn exhaustive_best_subset(problem: &Problem, constraints: &ConstraintSet) -> Result<OracleResult> {
    exhaustive_best_subset_capped(problem, constraints, ENUMERATION_CAP)
}

/// Enumerates every feature subset of size `1..=k` in lexicographic order
/// (sizes ascending), skips those whose induced selection violates a
/// constraint, and keeps the first subset attaining the smallest cost.
///
/// Supports smaller than `k` are included because a selection matrix may pick
/// the same feature in several columns.
pub fn exhaustive_best_subset_capped(
    problem: &Problem,
    constraints: &ConstraintSet,
    cap: u128,
) -> Result<OracleResult> {
    let (d, k) = (problem.d(), problem.k());
    let count = subset_count(d, k);
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }
    let mut best: Option<OracleResult> = None;
    let mut evaluated = 0u64;
    for size in 1..=k.min(d) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            if constraints.satisfied_by_support(&idx, d) {
                evaluated += 1;
                let (coef, cost) = least_squares(problem.a(), problem.y(), &idx);
                if best.as_ref().map_or(true, |b| cost < b.cost) {
                    best = Some(OracleResult {
                        support: idx.clone(),
                        coefficients: coef.iter().cloned().collect(),
                        cost,
                        subsets_evaluated: 0,
                    });
                }
            }
            if !next_combination(&mut idx, d) {
                break;
            }
        }
    }
    let mut best = best.ok_or_else(|| Error::Infeasible("no subset satisfies the constraints".into()))?;
    best.subsets_evaluated = evaluated;
    Ok(best)
}

/// Advances `idx` to the next combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let r = idx.len();
    let mut i = r;
    while i > 0 {
        i -= 1;
        if idx[i] < n - r + i {
            idx[i] += 1;
            for j in i + 1..r {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Orthogonal matching pursuit: `k` rounds of picking the unused column most
/// correlated with the residual (lowest index on ties), refitting least
/// squares on the selection after each round. Columns of `V` follow the
/// selection order.
pub fn omp(problem: &Problem) -> Result<SparseSolution> {
    let (a, y) = (problem.a(), problem.y());
    let (d, k) = (problem.d(), problem.k());
    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut residual = y.clone();
    let mut coef = DVector::zeros(0);
    for _ in 0..k {
        let corr = a.transpose() * &residual;
        let mut pick = None;
        for j in (0..d).filter(|j| !selected.contains(j)) {
            if pick.map_or(true, |p: usize| corr[j].abs() > corr[p].abs()) {
                pick = Some(j);
            }
        }
        let Some(j) = pick else { break };
        selected.push(j);
        let (c, _) = least_squares(a, y, &selected);
        residual = y - a.select_columns(selected.iter()) * &c;
        coef = c;
    }
    let mut v = DMatrix::zeros(d, selected.len());
    for (t, &i) in selected.iter().enumerate() {
        v[(i, t)] = 1.0;
    }
    SparseSolution::from_selection(problem, v, coef)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{at_most_one, group_tie};

    fn toy() -> Problem {
        let a = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 0.3, 0.0, 1.0, 0.2, 0.0, 0.0, 1.0, 0.5, 0.5, 0.0],
        );
        let y = a.column(1).into_owned();
        Problem::new(a, y, 1).unwrap()
    }

    #[test]
    fn exact_column_is_found() {
        let r = exhaustive_best_subset(&toy(), &ConstraintSet::default()).unwrap();
        assert_eq!(r.support, vec![1]);
        assert!(r.cost < 1e-24);
        assert_eq!(r.subsets_evaluated, 3);
    }

    #[test]
    fn combinations_are_lexicographic_and_complete() {
        let mut idx = vec![0, 1];
        let mut seen = vec![idx.clone()];
        while next_combination(&mut idx, 4) {
            seen.push(idx.clone());
        }
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(subset_count(15, 3), 15 + 105 + 455);
    }

    #[test]
    fn cap_refuses_with_count() {
        let p = toy().with_k(2).unwrap();
        match exhaustive_best_subset_capped(&p, &ConstraintSet::default(), 5) {
            Err(Error::EnumerationCap { count, cap }) => assert_eq!((count, cap), (6, 5)),
            other => panic!("expected a refusal, got {other:?}"),
        }
    }

    #[test]
    fn constraints_filter_subsets() {
        let p = toy().with_k(2).unwrap();
        let forbid = ConstraintSet::new(vec![at_most_one(&[0, 1]).unwrap()]);
        let r = exhaustive_best_subset(&p, &forbid).unwrap();
        assert!(!(r.support.contains(&0) && r.support.contains(&1)));
        let tie = ConstraintSet::new(vec![group_tie(&[0, 2]).unwrap()]);
        let r = exhaustive_best_subset(&p, &tie).unwrap();
        assert!(r.support.contains(&0) == r.support.contains(&2));
    }

    #[test]
    fn omp_is_exact_on_orthonormal_columns() {
        let a = DMatrix::<f64>::identity(8, 8);
        let mut y = DVector::zeros(8);
        y[3] = 2.0;
        y[7] = 1.0;
        let p = Problem::new(a, y, 2).unwrap();
        let s = omp(&p).unwrap();
        assert_eq!(s.support, vec![3, 7]);
        assert!((s.x[0] - 2.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
        assert!(s.cost < 1e-24);
        assert_eq!(s.v[(3, 0)], 1.0);
    }
}
