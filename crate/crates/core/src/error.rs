use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the calibration and training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("unknown secret {secret:?} referenced by example {example:?}")]
    UnknownSecret { example: String, secret: String },

    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },

    #[error("invalid id: {0}")]
    EmptyId(&'static str),

    #[error("secret {id:?}: posterior must exceed prior (p = {p}, r = {r})")]
    PosteriorNotAbovePrior { id: String, p: f64, r: f64 },

    #[error("secret {id:?}: probabilities out of range (p = {p}, r = {r})")]
    ProbabilityOutOfRange { id: String, p: f64, r: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing KL budget for secret {0:?}")]
    MissingBudget(String),

    #[error(
        "batch target {batch_target} too large: need max_i w_i <= sum(w) / B \
         (max w = {max_weight}, sum w = {total_weight}); reduce the batch target"
    )]
    BatchTooLarge {
        batch_target: f64,
        max_weight: f64,
        total_weight: f64,
    },

    #[error("quadrature did not converge on [{lo}, {hi}]")]
    QuadratureDiverged { lo: f64, hi: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
