use thiserror::Error;

/// Errors raised by the library.
#[derive(Error, Debug)]
pub enum FpcaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("point {point:?} lies outside the domain{}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Domain { point: Vec<f64>, row: Option<usize> },

    #[error("invalid state: {0}")]
    State(String),

    #[error("retraction failed: {0}")]
    Step(String),

    #[error("matrix is rank deficient: {0}")]
    Rank(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("initialization failed: {0}")]
    Init(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("subject {id}: {reason}")]
    Data { id: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FpcaError {
    /// Process exit code used by the command-line frontend.
    pub fn exit_code(&self) -> i32 {
        match self {
            FpcaError::Config(_) | FpcaError::Argument(_) => 2,
            FpcaError::Domain { .. }
            | FpcaError::Parse { .. }
            | FpcaError::Data { .. }
            | FpcaError::Io(_) => 3,
            FpcaError::State(_)
            | FpcaError::Step(_)
            | FpcaError::Rank(_)
            | FpcaError::Numerical(_)
            | FpcaError::Init(_) => 4,
        }
    }
}

pub type Result<T, E = FpcaError> = std::result::Result<T, E>;
