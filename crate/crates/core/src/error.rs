use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's precondition (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The autodiff graph is malformed.
    #[error("graph structure error: {0}")]
    Structural(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input for which the operation is undefined, e.g. normalizing an all-zero slice.
    #[error("degenerate input to {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("division by zero in {op}")]
    DivisionByZero { op: &'static str },

    /// Malformed dataset or checkpoint file.
    #[error("{}: format error at byte {offset}: {detail}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trial diverged: {0}")]
    Divergence(String),

    #[error("csv line {line}: {detail}")]
    Csv { line: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(detail: impl Into<String>) -> Self {
        Error::Parameter(detail.into())
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DegenerateInput {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end: 1 usage or config,
    /// 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Csv { .. } => 2,
            Error::Divergence(_) | Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}
