use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the library.
///
/// Variants fall into three families that the CLI maps onto exit codes:
/// data problems, model problems and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("mode mismatch: expected {expected}, got {found}")]
    ModeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid time step {0} (must be positive and finite)")]
    InvalidTimeStep(f64),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("malformed input at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("step {step} has {jumps} jumps but only {slots} subintervals")]
    TooFewSubintervals {
        step: usize,
        jumps: u64,
        slots: usize,
    },

    #[error("observation at step {step} is impossible under every hidden state")]
    ImpossibleObservation { step: usize },

    #[error("migration {from}→{to} at time {time} has zero intensity under every hidden state")]
    ImpossibleJump { time: f64, from: usize, to: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 data error, 2 model error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidData(_)
            | Error::Malformed { .. }
            | Error::Empty(_)
            | Error::TooFewSubintervals { .. }
            | Error::Io(_)
            | Error::Csv(_) => 1,
            Error::InvalidModel(_)
            | Error::ModeMismatch { .. }
            | Error::Dimension(_)
            | Error::InvalidTimeStep(_)
            | Error::Json(_) => 2,
            Error::ImpossibleObservation { .. }
            | Error::ImpossibleJump { .. }
            | Error::Numerical(_) => 3,
        }
    }
}
