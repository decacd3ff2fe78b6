//! Dataset ingestion and synthetic instance generation.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Problem;

/// Records in the UCI automobile file.
pub const AUTOMOBILE_RECORDS: usize = 205;
/// Records left once incomplete rows are dropped.
pub const AUTOMOBILE_COMPLETE: usize = 195;

/// A named column of the raw CSV (0-based position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRef {
    pub name: String,
    pub column: usize,
}

impl ColumnRef {
    fn new(name: &str, column: usize) -> Self {
        Self { name: name.to_string(), column }
    }
}

/// Which raw columns become the features `a_1..a_13` and the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapping {
    pub features: Vec<ColumnRef>,
    pub target: ColumnRef,
}

impl FeatureMapping {
    /// Default ordering: the body dimensions and weight, then the engine
    /// characteristics, then the two fuel-economy figures.
    pub fn automobile() -> Self {
        Self {
            features: vec![
                ColumnRef::new("length", 10),
                ColumnRef::new("width", 11),
                ColumnRef::new("height", 12),
                ColumnRef::new("curb-weight", 13),
                ColumnRef::new("wheel-base", 9),
                ColumnRef::new("engine-size", 16),
                ColumnRef::new("bore", 18),
                ColumnRef::new("stroke", 19),
                ColumnRef::new("compression-ratio", 20),
                ColumnRef::new("horsepower", 21),
                ColumnRef::new("peak-rpm", 22),
                ColumnRef::new("city-mpg", 23),
                ColumnRef::new("highway-mpg", 24),
            ],
            target: ColumnRef::new("price", 25),
        }
    }

    /// UCI attribute order: wheel-base, length, width, height, curb-weight, ...
    pub fn uci_order() -> Self {
        let mut m = Self::automobile();
        let wheel_base = m.features.remove(4);
        m.features.insert(0, wheel_base);
        m
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.features.is_empty() {
            return Err(Error::Config("mapping lists no features".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub mapping: FeatureMapping,
    /// Literal marking a missing value.
    pub missing_marker: String,
    pub expected_records: Option<usize>,
    pub expected_complete: Option<usize>,
}

impl DatasetSpec {
    pub fn automobile(path: impl AsRef<Path>) -> Self {
        Self {
            path: path.as_ref().to_path_buf(),
            mapping: FeatureMapping::automobile(),
            missing_marker: "?".into(),
            expected_records: Some(AUTOMOBILE_RECORDS),
            expected_complete: Some(AUTOMOBILE_COMPLETE),
        }
    }
}

/// Loads the automobile data, drops incomplete records and scales every
/// feature column and the target to unit 2-norm. The returned problem has
/// `k = 1`; use [`Problem::with_k`] to set the budget.
pub fn load_automobile(spec: &DatasetSpec) -> Result<Problem> {
    let text = std::fs::read_to_string(&spec.path)?;
    parse_automobile(&text, spec)
}

pub fn parse_automobile(text: &str, spec: &DatasetSpec) -> Result<Problem> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut wanted: Vec<&ColumnRef> = spec.mapping.features.iter().collect();
    wanted.push(&spec.mapping.target);

    let mut total = 0;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (record_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            record: record_idx + 1,
            column: 0,
            message: e.to_string(),
        })?;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        total += 1;
        let mut values = Vec::with_capacity(wanted.len());
        let mut complete = true;
        for col in &wanted {
            let raw = record.get(col.column).ok_or_else(|| Error::Parse {
                record: record_idx + 1,
                column: col.column + 1,
                message: format!("record has only {} fields", record.len()),
            })?;
            let raw = raw.trim();
            if raw == spec.missing_marker {
                complete = false;
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                record: record_idx + 1,
                column: col.column + 1,
                message: format!("'{raw}' is not a number ({})", col.name),
            })?;
            values.push(v);
        }
        if complete {
            rows.push(values);
        }
    }

    if let Some(expected) = spec.expected_records {
        if total != expected {
            return Err(Error::Integrity(format!("expected {expected} records, found {total}")));
        }
    }
    if let Some(expected) = spec.expected_complete {
        if rows.len() != expected {
            return Err(Error::Integrity(format!(
                "expected {expected} complete records, found {}",
                rows.len()
            )));
        }
    }
    if rows.is_empty() {
        return Err(Error::Integrity("no complete records".into()));
    }

    let d = spec.mapping.features.len();
    let n = rows.len();
    let mut a = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mut y = DVector::from_fn(n, |i, _| rows[i][d]);
    for mut col in a.column_iter_mut() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::Integrity("a feature column is identically zero".into()));
        }
        col /= norm;
    }
    let norm = y.norm();
    if norm == 0.0 {
        return Err(Error::Integrity("target column is identically zero".into()));
    }
    y /= norm;
    let names = spec.mapping.features.iter().map(|c| c.name.clone()).collect();
    Problem::new(a, y, 1)?.with_feature_names(names)
}

/// Planted-sparsity regression instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub k_true: usize,
    /// Budget of the returned problem.
    pub k: usize,
    pub noise_sigma: f64,
    /// Nonzero coefficients are drawn uniformly from `[lo, hi]` with a random sign.
    pub coef_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n: 8, d: 15, k_true: 3, k: 5, noise_sigma: 0.05, coef_range: (1.0, 2.0), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub problem: Problem,
    /// Planted support, 0-based, ascending.
    pub support: Vec<usize>,
    pub w: DVector<f64>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticInstance> {
    if spec.k_true == 0 || spec.k_true > spec.d {
        return Err(Error::Config(format!("k_true = {} must lie in [1, {}]", spec.k_true, spec.d)));
    }
    let (lo, hi) = spec.coef_range;
    if !(lo <= hi && lo >= 0.0) {
        return Err(Error::Config(format!("bad coefficient range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = DMatrix::from_fn(spec.n, spec.d, |_, _| StandardNormal.sample(&mut rng));
    let mut support = sample(&mut rng, spec.d, spec.k_true).into_vec();
    support.sort_unstable();
    let mut w = DVector::zeros(spec.d);
    for &i in &support {
        let mag = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        w[i] = if rng.random::<bool>() { mag } else { -mag };
    }
    let mut y = &a * &w;
    if spec.noise_sigma > 0.0 {
        for v in y.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_sigma * e;
        }
    }
    let problem = Problem::new(a, y, spec.k)?;
    Ok(SyntheticInstance { problem, support, w })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_csv(rows: usize, missing_every: usize) -> String {
        let mut out = String::new();
        for r in 0..rows {
            let mut fields: Vec<String> = (0..26).map(|c| format!("{}", 1 + (r * 7 + c * 3) % 11)).collect();
            if missing_every > 0 && r % missing_every == 0 {
                fields[21] = "?".into();
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    fn spec(records: usize, complete: usize) -> DatasetSpec {
        DatasetSpec {
            expected_records: Some(records),
            expected_complete: Some(complete),
            ..DatasetSpec::automobile("unused")
        }
    }

    #[test]
    fn loads_normalizes_and_drops_incomplete() {
        let text = fake_csv(20, 5);
        let p = parse_automobile(&text, &spec(20, 16)).unwrap();
        assert_eq!((p.n(), p.d()), (16, 13));
        for j in 0..13 {
            assert!((p.a().column(j).norm() - 1.0).abs() < 1e-12);
        }
        assert!((p.y().norm() - 1.0).abs() < 1e-12);
        assert_eq!(p.feature_names()[0], "length");
    }

    #[test]
    fn record_count_is_checked() {
        let text = fake_csv(19, 5);
        assert!(matches!(parse_automobile(&text, &spec(20, 16)), Err(Error::Integrity(_))));
    }

    #[test]
    fn bad_number_reports_position() {
        let text = fake_csv(3, 0).replacen("1,", "x1,", 1);
        match parse_automobile(&text, &spec(3, 3)) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, 1),
            Err(Error::Integrity(_)) | Ok(_) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn uci_order_starts_with_wheel_base() {
        let m = FeatureMapping::uci_order();
        let names: Vec<_> = m.features.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(&names[..5], &["wheel-base", "length", "width", "height", "curb-weight"]);
        let cols: Vec<_> = m.features.iter().map(|c| c.column).collect();
        assert_eq!(cols, vec![9, 10, 11, 12, 13, 16, 18, 19, 20, 21, 22, 23, 24]);
    }

    #[test]
    fn synthetic_is_deterministic_and_planted() {
        let spec = SyntheticSpec { seed: 17, noise_sigma: 0.0, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.support.len(), 3);
        assert_eq!(a.w.iter().filter(|v| **v != 0.0).count(), 3);
        assert!(a.w.iter().all(|v| *v == 0.0 || (1.0..=2.0).contains(&v.abs())));
        assert!((a.problem.a() * &a.w - a.problem.y()).amax() == 0.0);
        let noisy = generate_synthetic(&SyntheticSpec { seed: 17, ..Default::default() }).unwrap();
        assert_eq!(noisy.problem.a(), a.problem.a());
        assert!((noisy.problem.y() - a.problem.y()).amax() > 0.0);
    }
}
