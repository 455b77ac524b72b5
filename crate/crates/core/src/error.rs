use thiserror::Error;

/// Errors produced by the numeric and protocol layers of this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {what} = {value} is outside {range}")]
    Domain {
        what: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("joint weight budget exceeded: M^K = {m}^{k} > {budget}")]
    Budget { m: usize, k: usize, budget: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("decode error at offset {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
