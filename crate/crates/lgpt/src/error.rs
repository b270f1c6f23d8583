use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI exit codes
/// (usage/config = 2, I/O = 3, assertion = 1).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("unknown name '{0}' in graph")]
    UnknownName(String),

    #[error("gradient key mismatch: {0}")]
    KeyMismatch(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("wav error in {path:?}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("chain step {step} ({task}) failed: {msg}")]
    ChainStep {
        step: usize,
        task: String,
        msg: String,
    },

    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 assertion, 2 usage/config, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Assertion(_) => 1,
            Error::Io(_) | Error::Wav { .. } | Error::Checkpoint(_) => 3,
            _ => 2,
        }
    }
}
