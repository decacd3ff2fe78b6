//! Structural feature-selection constraints expressed as linear constraints on `Q`.
//!
//! Every family here is a function of the row sums `R_i = sum_t q_it`, i.e. of
//! the expected number of slots that pick feature `i`:
//!
//! * at most one of a set: `sum_{i in S} R_i <= 1`
//! * at least one of a set: `sum_{i in S} R_i >= 1`
//! * group: `R_{l_1} = R_{l_m}` for every other member `l_m`, so on a binary `V`
//!   the group is either entirely in the support or entirely out of it.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    AtMostOne,
    AtLeastOne,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
}

/// One scalar constraint `sum_i c_i R_i  (rel)  bound` over row sums of `Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowConstraint {
    /// `(feature, coefficient)` pairs, 0-based features.
    pub coefficients: Vec<(usize, f64)>,
    pub relation: Relation,
    pub bound: f64,
}

impl RowConstraint {
    fn lhs(&self, row_sums: &[f64]) -> f64 {
        self.coefficients.iter().map(|&(i, c)| c * row_sums[i]).sum()
    }

    /// Normalized value: `g <= 0` for inequalities, `h = 0` for equalities.
    pub fn value(&self, row_sums: &[f64]) -> f64 {
        let lhs = self.lhs(row_sums);
        match self.relation {
            Relation::Le | Relation::Eq => lhs - self.bound,
            Relation::Ge => self.bound - lhs,
        }
    }

    /// `d(value)/d q_it` for any slot `t`, per feature.
    pub fn orientation(&self) -> f64 {
        match self.relation {
            Relation::Ge => -1.0,
            _ => 1.0,
        }
    }

    pub fn is_equality(&self) -> bool {
        self.relation == Relation::Eq
    }

    pub fn holds(&self, row_sums: &[f64], tol: f64) -> bool {
        let v = self.value(row_sums);
        if self.is_equality() {
            v.abs() <= tol
        } else {
            v <= tol
        }
    }
}

/// A structural constraint from one of the three families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub kind: ConstraintKind,
    /// 0-based feature indices, in the order given.
    pub features: Vec<usize>,
}

impl LinearConstraint {
    fn build(kind: ConstraintKind, features: &[usize]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::Domain(format!(
                "{kind:?} needs at least two features, got {}",
                features.len()
            )));
        }
        let distinct: BTreeSet<_> = features.iter().collect();
        if distinct.len() != features.len() {
            return Err(Error::Domain(format!("{kind:?} lists a feature twice: {features:?}")));
        }
        Ok(Self { kind, features: features.to_vec() })
    }

    /// Scalar rows this constraint expands to.
    pub fn rows(&self) -> Vec<RowConstraint> {
        match self.kind {
            ConstraintKind::AtMostOne | ConstraintKind::AtLeastOne => vec![RowConstraint {
                coefficients: self.features.iter().map(|&i| (i, 1.0)).collect(),
                relation: if self.kind == ConstraintKind::AtMostOne { Relation::Le } else { Relation::Ge },
                bound: 1.0,
            }],
            ConstraintKind::Group => {
                let lead = self.features[0];
                self.features[1..]
                    .iter()
                    .map(|&i| RowConstraint {
                        coefficients: vec![(lead, 1.0), (i, -1.0)],
                        relation: Relation::Eq,
                        bound: 0.0,
                    })
                    .collect()
            }
        }
    }

    /// Expansion into `(coefficient, (i, t))` terms over all `k` slots, one entry
    /// per scalar row.
    pub fn as_terms(&self, k: usize) -> Vec<(Vec<(f64, (usize, usize))>, Relation, f64)> {
        self.rows()
            .into_iter()
            .map(|r| {
                let terms = r
                    .coefficients
                    .iter()
                    .flat_map(|&(i, c)| (0..k).map(move |t| (c, (i, t))))
                    .collect();
                (terms, r.relation, r.bound)
            })
            .collect()
    }

    /// Exact satisfaction on a binary selection matrix.
    pub fn satisfied_by(&self, v: &DMatrix<f64>) -> bool {
        let sums = row_sums(v);
        self.rows().iter().all(|r| r.holds(&sums, 1e-9))
    }

    /// Satisfaction by a support set (each feature used once).
    pub fn satisfied_by_support(&self, support: &[usize], d: usize) -> bool {
        let mut sums = vec![0.0; d];
        for &i in support {
            sums[i] = 1.0;
        }
        self.rows().iter().all(|r| r.holds(&sums, 1e-9))
    }
}

/// At most one of `features` (0-based) may be selected.
pub fn at_most_one(features: &[usize]) -> Result<LinearConstraint> {
    LinearConstraint::build(ConstraintKind::AtMostOne, features)
}

/// At least one of `features` (0-based) must be selected.
pub fn at_least_one(features: &[usize]) -> Result<LinearConstraint> {
    LinearConstraint::build(ConstraintKind::AtLeastOne, features)
}

/// `features` (0-based) enter or leave the support together.
pub fn group_tie(features: &[usize]) -> Result<LinearConstraint> {
    LinearConstraint::build(ConstraintKind::Group, features)
}

/// Augmented-Lagrangian multipliers, one per scalar row of a [`ConstraintSet`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Multipliers(pub Vec<f64>);

impl Multipliers {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.0.get(idx).copied().unwrap_or(0.0)
    }
}

/// Why a constraint set cannot be satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityReport {
    pub constraints: Vec<usize>,
    pub reason: String,
}

impl std::fmt::Display for InfeasibilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (constraints {:?})", self.reason, self.constraints)
    }
}

impl From<InfeasibilityReport> for Error {
    fn from(r: InfeasibilityReport) -> Self {
        Error::Infeasible(r.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSet {
    constraints: Vec<LinearConstraint>,
    rows: Vec<RowConstraint>,
}

#[derive(Serialize, Deserialize)]
struct ConstraintEntry {
    kind: ConstraintKind,
    features: Vec<usize>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<LinearConstraint>) -> Self {
        let rows = constraints.iter().flat_map(|c| c.rows()).collect();
        Self { constraints, rows }
    }

    pub fn push(&mut self, c: LinearConstraint) {
        self.rows.extend(c.rows());
        self.constraints.push(c);
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn constraints(&self) -> &[LinearConstraint] {
        &self.constraints
    }

    /// Flattened scalar rows; multipliers are indexed by position here.
    pub fn rows(&self) -> &[RowConstraint] {
        &self.rows
    }

    /// Parses the JSON list `[{"kind": ..., "features": [1-based...]}, ...]`.
    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<ConstraintEntry> = serde_json::from_str(text)?;
        let mut set = Self::default();
        for (idx, e) in entries.into_iter().enumerate() {
            if e.features.iter().any(|&f| f == 0) {
                return Err(Error::Domain(format!("constraint {idx}: feature indices are 1-based")));
            }
            let zero_based: Vec<usize> = e.features.iter().map(|f| f - 1).collect();
            set.push(LinearConstraint::build(e.kind, &zero_based)?);
        }
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<ConstraintEntry> = self
            .constraints
            .iter()
            .map(|c| ConstraintEntry {
                kind: c.kind,
                features: c.features.iter().map(|f| f + 1).collect(),
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("constraint list serializes")
    }

    /// Structural feasibility check for a problem with `d` features and budget `k`.
    pub fn validate(&self, k: usize, d: usize) -> std::result::Result<(), InfeasibilityReport> {
        for (idx, c) in self.constraints.iter().enumerate() {
            if let Some(&bad) = c.features.iter().find(|&&f| f >= d) {
                return Err(InfeasibilityReport {
                    constraints: vec![idx],
                    reason: format!("feature {} outside [1, {d}]", bad + 1),
                });
            }
        }

        // Selecting feature i forces its whole group in.
        let mut forced = vec![1usize; d];
        for c in self.constraints.iter().filter(|c| c.kind == ConstraintKind::Group) {
            for &f in &c.features {
                forced[f] = forced[f].max(c.features.len());
            }
        }

        let covers: Vec<(usize, BTreeSet<usize>, usize)> = self
            .constraints
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ConstraintKind::AtLeastOne)
            .map(|(idx, c)| {
                let need = c.features.iter().map(|&f| forced[f]).min().unwrap_or(1);
                (idx, c.features.iter().copied().collect(), need)
            })
            .collect();

        for (idx, _, need) in &covers {
            if *need > k {
                return Err(InfeasibilityReport {
                    constraints: vec![*idx],
                    reason: format!("every feature of the set sits in a group larger than k = {k}"),
                });
            }
        }

        let mut best = (0usize, Vec::new());
        let mut chosen = Vec::new();
        pack_disjoint(&covers, 0, &mut chosen, 0, &mut BTreeSet::new(), &mut best);
        if best.0 > k {
            return Err(InfeasibilityReport {
                constraints: best.1,
                reason: format!("disjoint at-least-one sets force {} selections but k = {k}", best.0),
            });
        }
        Ok(())
    }

    /// `validate` with the report turned into an [`Error`].
    pub fn check(&self, k: usize, d: usize) -> Result<()> {
        self.validate(k, d).map_err(Error::from)
    }

    /// Augmented-Lagrangian contribution and its gradient in `Q`:
    /// `sum_c mu_c g_c + (rho/2) max(0, g_c)^2` for inequalities and
    /// `mu_c h_c + (rho/2) h_c^2` for equalities.
    pub fn penalty_and_gradient(
        &self,
        q: &DMatrix<f64>,
        multipliers: &Multipliers,
        rho: f64,
    ) -> (f64, DMatrix<f64>) {
        let sums = row_sums(q);
        let mut grad = DMatrix::zeros(q.nrows(), q.ncols());
        let mut total = 0.0;
        for (idx, row) in self.rows.iter().enumerate() {
            let mu = multipliers.get(idx);
            let g = row.value(&sums);
            let active = if row.is_equality() { g } else { g.max(0.0) };
            total += mu * g + 0.5 * rho * active * active;
            let slope = (mu + rho * active) * row.orientation();
            for &(i, c) in &row.coefficients {
                for t in 0..q.ncols() {
                    grad[(i, t)] += slope * c;
                }
            }
        }
        (total, grad)
    }

    /// Projected multiplier step: `max(0, mu + rho g)` for inequalities, `mu + rho h`
    /// for equalities.
    pub fn update_multipliers(&self, q: &DMatrix<f64>, multipliers: &Multipliers, rho: f64) -> Multipliers {
        let sums = row_sums(q);
        Multipliers(
            self.rows
                .iter()
                .enumerate()
                .map(|(idx, row)| {
                    let next = multipliers.get(idx) + rho * row.value(&sums);
                    if row.is_equality() {
                        next
                    } else {
                        next.max(0.0)
                    }
                })
                .collect(),
        )
    }

    /// Per-constraint satisfaction on a binary `V`.
    pub fn satisfaction(&self, v: &DMatrix<f64>) -> Vec<bool> {
        self.constraints.iter().map(|c| c.satisfied_by(v)).collect()
    }

    pub fn satisfied_by_support(&self, support: &[usize], d: usize) -> bool {
        self.constraints.iter().all(|c| c.satisfied_by_support(support, d))
    }

    /// Largest normalized violation on `Q` (0 when every row holds).
    pub fn max_violation(&self, q: &DMatrix<f64>) -> f64 {
        let sums = row_sums(q);
        self.rows
            .iter()
            .map(|r| {
                let v = r.value(&sums);
                if r.is_equality() {
                    v.abs()
                } else {
                    v.max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }
}

fn pack_disjoint(
    covers: &[(usize, BTreeSet<usize>, usize)],
    start: usize,
    chosen: &mut Vec<usize>,
    weight: usize,
    used: &mut BTreeSet<usize>,
    best: &mut (usize, Vec<usize>),
) {
    if weight > best.0 {
        *best = (weight, chosen.clone());
    }
    for idx in start..covers.len() {
        let (cid, set, need) = &covers[idx];
        if set.iter().any(|f| used.contains(f)) {
            continue;
        }
        used.extend(set.iter().copied());
        chosen.push(*cid);
        pack_disjoint(covers, idx + 1, chosen, weight + need, used, best);
        chosen.pop();
        for f in set {
            used.remove(f);
        }
    }
}

/// `sum_t q_it` per feature.
pub fn row_sums(q: &DMatrix<f64>) -> Vec<f64> {
    q.row_iter().map(|r| r.sum()).collect()
}
