use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("matrix is singular or numerically rank deficient: {0}")]
    Singular(String),
    #[error("degenerate representation: {0}")]
    Degenerate(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("gradient check kept landing near a kink after {tries} batches")]
    KinkProximity { tries: usize },
    #[error("score undefined: {0}")]
    UndefinedScore(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Dimension {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
