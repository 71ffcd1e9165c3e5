use thiserror::Error;

use crate::params::Ensemble;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empirical input law rejected in strict admissibility mode")]
    StrictAdmissibility,

    #[error("minimum Bayes risk not attained by a finite predictor: {0}")]
    MbrNotAttained(String),

    #[error("no Bayes-optimal predictor for this loss / label combination")]
    NoBayesPredictor,

    /// The integrator produced a non-finite state. `dump` holds the last
    /// finite ensemble.
    #[error("run aborted at step {step} (t = {time}): {reason}")]
    Aborted { step: usize, time: f64, reason: String, dump: Box<Ensemble> },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },
}
