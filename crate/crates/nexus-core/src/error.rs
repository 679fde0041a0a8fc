//! Crate-wide error type.
//!
//! Numeric ops return `ShapeMismatch`/`InvalidArgument` instead of panicking so
//! that the CLI can map every failure to a stable exit code. `Diverged` is the
//! one runtime error that is not a usage problem.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("domain {0:?} has no usable documents")]
    EmptyCorpus(String),

    #[error(
        "synthetic domains are not distinguishable: classifier accuracy {accuracy:.4} < {required:.2}"
    )]
    IndistinguishableDomains { accuracy: f64, required: f64 },

    #[error("model configs differ in: {fields:?}")]
    ConfigMismatch { fields: Vec<String> },

    #[error("domain {0:?} is already attached to an expert")]
    DuplicateDomain(String),

    #[error("operation requires a domain-projection router: {0}")]
    UnsupportedRouter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
