use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A problem, control or derivative bundle failed construction-time checks.
    #[error("validation failed for `{entry}`: {detail}")]
    Validation { entry: String, detail: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite state at step {step} of path {path}")]
    Simulation { path: u64, step: usize },

    #[error("{operation} is not supported for this problem: {reason}")]
    Unsupported {
        operation: &'static str,
        reason: String,
    },

    #[error("required derivative `{0}` is not provided by the problem")]
    MissingDerivative(&'static str),

    #[error("time {t} lies outside the horizon [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("training aborted at iteration {iter}: {reason}")]
    TrainingAborted { iter: usize, reason: String },

    #[error("Riccati solution escapes to infinity near t = {escape_time}")]
    FiniteEscape { escape_time: f64 },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(entry: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation {
            entry: entry.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }
}
