use thiserror::Error;

/// Errors produced by model loading, kernel evaluation and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid input for kernel: {0}")]
    KernelInput(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("column `{0}` is not numeric")]
    NonNumeric(String),

    #[error("unseen categorical level `{0}`")]
    UnseenLevel(String),

    #[error("model specification error: {0}")]
    Spec(String),

    #[error("nothing to estimate")]
    NothingToEstimate,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 usage, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParam(_) | Error::Spec(_) | Error::Parse(_) | Error::NothingToEstimate => 2,
            Error::DimensionMismatch(_)
            | Error::KernelInput(_)
            | Error::UnknownColumn(_)
            | Error::NonNumeric(_)
            | Error::UnseenLevel(_)
            | Error::Data(_)
            | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
