use std::path::PathBuf;

use crate::autodiff::AdError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("age {age} outside [{lo}, {hi}]")]
    AgeOutOfRange { age: f64, lo: f64, hi: f64 },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("training diverged in {phase} at step {step}: {detail}")]
    Diverged {
        phase: &'static str,
        step: usize,
        detail: String,
    },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("missing result files in {dir}: {missing:?}")]
    MissingResults { dir: PathBuf, missing: Vec<String> },
    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("inconsistent results: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
