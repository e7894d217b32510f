use thiserror::Error;

pub type Result<T> = std::result::Result<T, BatError>;

#[derive(Debug, Error)]
pub enum BatError {
    /// Input data contained NaN or infinity.
    #[error("invalid calibration data: non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("shape error: dimension {dim} has size {size}, {reason}")]
    Shape { dim: usize, size: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    Mismatch(String),

    #[error("singular factor {factor} (condition estimate {condition:e})")]
    Singular { factor: String, condition: f64 },

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("calibration diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    /// One or more verification checks failed.
    #[error("verification failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BatError {
    /// Stable process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            BatError::Invalid(_) => 1,
            BatError::NonFinite { .. }
            | BatError::Shape { .. }
            | BatError::Mismatch(_)
            | BatError::Format(_)
            | BatError::Io(_) => 2,
            BatError::Singular { .. }
            | BatError::NonFiniteGradient { .. }
            | BatError::Diverged { .. }
            | BatError::CheckFailed(_) => 3,
        }
    }

    /// Short machine-parsable tag printed by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            BatError::NonFinite { .. } => "E_NONFINITE",
            BatError::Shape { .. } => "E_SHAPE",
            BatError::Mismatch(_) => "E_MISMATCH",
            BatError::Singular { .. } => "E_SINGULAR",
            BatError::NonFiniteGradient { .. } => "E_GRADIENT",
            BatError::Diverged { .. } => "E_DIVERGED",
            BatError::Invalid(_) => "E_USAGE",
            BatError::Format(_) => "E_FORMAT",
            BatError::CheckFailed(_) => "E_CHECK",
            BatError::Io(_) => "E_IO",
        }
    }
}
