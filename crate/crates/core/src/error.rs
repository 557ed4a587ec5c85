use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("simulation blew up: {0}")]
    BlowUp(String),

    #[error("malformed metadata in {path}: {reason}")]
    Metadata { path: PathBuf, reason: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("checksum mismatch in {path}")]
    Checksum { path: PathBuf },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status: 2 bad arguments or inputs, 3 failed verification,
    /// 4 training divergence, 5 file problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 3,
            Error::Divergence { .. } => 4,
            Error::Io { .. }
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Metadata { .. }
            | Error::Json(_)
            | Error::Csv(_) => 5,
            Error::Shape { .. }
            | Error::DegenerateRow { .. }
            | Error::Contract(_)
            | Error::Input(_)
            | Error::BlowUp(_)
            | Error::Config(_) => 2,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
