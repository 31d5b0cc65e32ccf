//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor engine, the model, and the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller violated an operation's contract (bad argument, duplicate
    /// frame id, non-scalar backward target, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// An object is in a state that forbids the operation (e.g. reading an
    /// empty memory bank).
    #[error("state error: {0}")]
    State(String),

    /// An op produced NaN or Inf. Never silent.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A function evaluation failed inside a numeric check.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// A scene or model configuration is invalid.
    #[error("spec error: {0}")]
    Spec(String),

    /// Malformed file content; `offset` is the byte position where parsing
    /// stopped making sense.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 1 for contract-level failures,
    /// 2 for I/O and parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Parse { .. } => 2,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            offset: 0,
            detail: e.to_string(),
        }
    }
}
