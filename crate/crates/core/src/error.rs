use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible constraint set: {0}")]
    Infeasible(String),

    #[error("linear system singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("parse error at record {record}, column {column}: {message}")]
    Parse {
        record: usize,
        column: usize,
        message: String,
    },

    #[error("enumeration refused: {count} subsets exceeds cap {cap}")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("unsupported schema version {found} for {schema} (expected {expected})")]
    SchemaVersion {
        schema: String,
        found: u32,
        expected: u32,
    },

    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
