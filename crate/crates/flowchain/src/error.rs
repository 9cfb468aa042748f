//! Crate-wide error type.
//!
//! One flat enum; variants carry enough context to point at the failing
//! layer/stage/parameter/line without a backtrace.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor/layer shape disagreement. `context` names the offending op or layer.
    ShapeMismatch { context: String, expected: String, got: String },
    /// A computation produced NaN or infinity. `context` names where.
    NonFinite { context: String },
    /// Bad configuration or argument.
    InvalidConfig(String),
    /// Gradient for the named parameter is NaN.
    NanGradient { param: String },
    /// Backward called on a tape without a completed forward pass.
    EmptyTape,
    /// The fast-update horizon is used up; predict from scratch instead.
    HorizonExhausted { updates_applied: usize, horizon: usize },
    /// Text-format parse failure with 1-based line number.
    Parse { line: usize, msg: String },
    /// Checkpoint/serialization problem (corrupt file, version or manifest mismatch).
    Checkpoint(String),
    /// Training diverged; message carries diagnostics.
    Diverged(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, expected, got } => {
                write!(f, "shape mismatch in {context}: expected {expected}, got {got}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NanGradient { param } => write!(f, "NaN gradient for parameter {param}"),
            Error::EmptyTape => write!(f, "backward called on an empty tape"),
            Error::HorizonExhausted { updates_applied, horizon } => write!(
                f,
                "update horizon exhausted after {updates_applied} updates (horizon {horizon}); \
                 predict from scratch to continue"
            ),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Diverged(msg) => write!(f, "training diverged: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
