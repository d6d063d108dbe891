//! Crate-wide error type and the process exit codes it maps onto.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model specification (zero width, too few layers, ...).
    #[error("spec error: {0}")]
    Spec(String),

    /// Invalid configuration value (λ ≤ 0, α outside (0,1), scheduler fields, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Parameter layout mismatch: offsets, shapes, or program/params disagreement.
    #[error("layout error: {0}")]
    Layout(String),

    /// Index out of range (layer index, milestone, ...).
    #[error("index error: {what} index {index} out of range (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Domain violation on an argument (empty dataset, α ≤ 0 rescale, probes = 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite value produced during numeric work. Carries the tape node
    /// or Monte-Carlo sample index where it surfaced.
    #[error("numeric error at {site} {index}: {message}")]
    Numeric {
        site: &'static str,
        index: usize,
        message: String,
    },

    /// Layer too large for the exact trace sweep; use the Hutchinson estimator.
    #[error("size error: {0}")]
    Size(String),

    /// Caller broke an operation’s calling contract (e.g. missing WCI value
    /// for the dynamic scheduler).
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed input file (IDX magic, truncated payload).
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must agree do not (image/label counts, layer counts).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Checkpoint failed to load: bad magic, version, hash, or truncation.
    #[error("checkpoint load error: {0}")]
    CheckpointLoad(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn numeric_node(node: usize, message: impl Into<String>) -> Self {
        Error::Numeric {
            site: "node",
            index: node,
            message: message.into(),
        }
    }

    pub fn numeric_sample(sample: usize, message: impl Into<String>) -> Self {
        Error::Numeric {
            site: "sample",
            index: sample,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 0 success, 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 3,
            Error::Io(_) | Error::CheckpointLoad(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
