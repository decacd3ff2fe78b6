//! Versioned JSON documents for problems, solutions, traces and reports.
//!
//! Every document is an envelope `{"schema": ..., "version": ..., "data": ...}`.
//! Floats are written with shortest round-trip formatting, so reading a
//! document back reproduces every value bit for bit.

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Problem, SparseSolution};
use crate::phase::TransitionReport;
use crate::solver::AnnealTrace;

pub const SCHEMA_VERSION: u32 = 1;

pub const PROBLEM_SCHEMA: &str = "problem";
pub const SOLUTION_SCHEMA: &str = "solution";
pub const TRACE_SCHEMA: &str = "trace";
pub const REPORT_SCHEMA: &str = "transition_report";

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    schema: &'a str,
    version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    produced_by: Option<&'a str>,
    data: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeHeader {
    schema: String,
    version: u32,
}

#[derive(Deserialize)]
struct EnvelopeIn<T> {
    data: T,
}

/// Wraps `value` in a versioned envelope.
pub fn to_document<T: Serialize>(schema: &str, value: &T) -> Result<String> {
    to_document_from(schema, value, None)
}

/// Like [`to_document`], recording which run produced the document.
pub fn to_document_from<T: Serialize>(schema: &str, value: &T, produced_by: Option<&str>) -> Result<String> {
    let env = EnvelopeOut { schema, version: SCHEMA_VERSION, produced_by, data: value };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    Ok(text)
}

/// Parses a document, checking the schema name and version before the payload.
pub fn from_document<T: DeserializeOwned>(schema: &str, text: &str) -> Result<T> {
    let header: EnvelopeHeader = serde_json::from_str(text)?;
    if header.schema != schema {
        return Err(Error::Config(format!("expected a {schema} document, found {}", header.schema)));
    }
    if header.version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            schema: schema.to_string(),
            found: header.version,
            expected: SCHEMA_VERSION,
        });
    }
    let env: EnvelopeIn<T> = serde_json::from_str(text)?;
    Ok(env.data)
}

/// On-disk form of a [`Problem`]: `A` row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemDoc {
    n: usize,
    d: usize,
    k: usize,
    a: Vec<Vec<f64>>,
    y: Vec<f64>,
    feature_names: Vec<String>,
}

impl From<&Problem> for ProblemDoc {
    fn from(p: &Problem) -> Self {
        Self {
            n: p.n(),
            d: p.d(),
            k: p.k(),
            a: p.a().row_iter().map(|r| r.iter().cloned().collect()).collect(),
            y: p.y().iter().cloned().collect(),
            feature_names: p.feature_names().to_vec(),
        }
    }
}

impl TryFrom<ProblemDoc> for Problem {
    type Error = Error;

    fn try_from(doc: ProblemDoc) -> Result<Self> {
        if doc.a.len() != doc.n || doc.a.iter().any(|r| r.len() != doc.d) {
            return Err(Error::Shape(format!("A does not match the declared {} x {}", doc.n, doc.d)));
        }
        let a = DMatrix::from_fn(doc.n, doc.d, |i, j| doc.a[i][j]);
        Problem::new(a, DVector::from_vec(doc.y), doc.k)?.with_feature_names(doc.feature_names)
    }
}

pub fn problem_to_json(p: &Problem) -> Result<String> {
    to_document(PROBLEM_SCHEMA, &ProblemDoc::from(p))
}

pub fn problem_to_json_from(p: &Problem, produced_by: Option<&str>) -> Result<String> {
    to_document_from(PROBLEM_SCHEMA, &ProblemDoc::from(p), produced_by)
}

pub fn problem_from_json(text: &str) -> Result<Problem> {
    from_document::<ProblemDoc>(PROBLEM_SCHEMA, text)?.try_into()
}

pub fn solution_to_json(s: &SparseSolution) -> Result<String> {
    to_document(SOLUTION_SCHEMA, s)
}

pub fn solution_from_json(text: &str) -> Result<SparseSolution> {
    from_document(SOLUTION_SCHEMA, text)
}

pub fn trace_to_json(t: &AnnealTrace) -> Result<String> {
    to_document(TRACE_SCHEMA, t)
}

pub fn trace_from_json(text: &str) -> Result<AnnealTrace> {
    from_document(TRACE_SCHEMA, text)
}

pub fn report_to_json(r: &TransitionReport) -> Result<String> {
    to_document(REPORT_SCHEMA, r)
}

pub fn report_from_json(text: &str) -> Result<TransitionReport> {
    from_document(REPORT_SCHEMA, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem() -> Problem {
        let a = DMatrix::from_fn(3, 2, |i, j| (i as f64 + 1.0) / (j as f64 + 3.0));
        Problem::new(a, DVector::from_vec(vec![0.1, 1.0 / 3.0, -2.5e-300]), 1).unwrap()
    }

    #[test]
    fn problem_round_trips_bitwise() {
        let p = problem();
        let back = problem_from_json(&problem_to_json(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = problem_to_json(&problem()).unwrap().replace("\"version\": 1", "\"version\": 7");
        match problem_from_json(&text) {
            Err(Error::SchemaVersion { found, expected, .. }) => assert_eq!((found, expected), (7, 1)),
            other => panic!("expected a version error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_schema_and_malformed_input_fail() {
        let text = problem_to_json(&problem()).unwrap();
        assert!(trace_from_json(&text).is_err());
        assert!(matches!(problem_from_json(&text[..text.len() / 2]), Err(Error::Json(_))));
    }

    #[test]
    fn ragged_matrix_is_a_shape_error() {
        let text = problem_to_json(&problem()).unwrap().replacen("\"n\": 3", "\"n\": 2", 1);
        assert!(matches!(problem_from_json(&text), Err(Error::Shape(_))));
    }
}
