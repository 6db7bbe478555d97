use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Time argument outside `[0, 1]`.
    #[error("time {t} outside [0, 1]")]
    Domain { t: f64 },

    /// A noise level outside the range a schedule or expert covers.
    #[error("noise level gamma = {gamma} outside [{lo}, {hi}]")]
    Range { gamma: f64, lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("singular parameterization: {0}")]
    Singularity(String),

    #[error("solver failed at t = {t}: {reason}")]
    Solver { t: f64, reason: String },

    #[error("training failed: {0}")]
    Training(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Configuration and data problems are the caller's fault; everything else is a runtime failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Data(_) | Error::Format(_) | Error::Shape { .. }
        )
    }
}
