use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("size error: requested {requested} {what}, but only {available} available")]
    Size {
        what: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid parameter {name}: {reason}")]
    Param { name: &'static str, reason: String },

    #[error("coordinate {value} out of range for a grid of side {side}")]
    Bounds { value: u64, side: u64 },

    #[error("non-finite value in {context} at step {step}")]
    Numeric { context: &'static str, step: usize },

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("parameter file error: {0}")]
    Load(String),

    #[error("shape mismatch for array `{name}`: expected {expected:?}, file has {found:?}")]
    ArrayShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("gradient check `{op}` failed: relative error {rel_error:e} at coordinate {coordinate} exceeds {tolerance:e}")]
    GradCheck {
        op: String,
        rel_error: f64,
        coordinate: usize,
        tolerance: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            name,
            reason: reason.into(),
        }
    }
}
