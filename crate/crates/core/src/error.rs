use thiserror::Error;

use crate::trace::RunTrace;

pub type Result<T, E = VacError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VacError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The iterate blew up; the trace recorded up to that point is preserved.
    #[error("diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        trace: Box<RunTrace>,
    },

    #[error("instance generation failed: {0}")]
    Generation(String),

    #[error("Q estimation did not settle after {batches} batches (last change {last_change:.3e}, eps {eps:.3e})")]
    Estimation {
        batches: usize,
        last_change: f64,
        eps: f64,
    },

    #[error("trajectory too short: need {needed} samples, {available} available")]
    TrajectoryExhausted { needed: usize, available: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VacError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        VacError::InvalidInput(msg.into())
    }

    pub(crate) fn shape(what: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        VacError::ShapeMismatch {
            what,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
