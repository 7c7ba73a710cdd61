// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the toolbox.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An index (layer, head, position, token id, ...) is out of range.
    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// NaN or infinity where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The eigensolver hit its sweep cap.
    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal mass {off_diagonal:e})")]
    NoConvergence { sweeps: usize, off_diagonal: f64 },

    /// Tensor container header is unreadable.
    #[error("malformed container header: {0}")]
    MalformedHeader(String),

    /// A required tensor is absent from the container.
    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    /// A tensor exists but has the wrong shape.
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Text input (config, vocabulary, embeddings, word lists, instances) failed to parse.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Word not present in the vocabulary or embedding table.
    #[error("unknown word `{0}`")]
    UnknownWord(String),

    /// Both operands of a set comparison are empty.
    #[error("undefined: {0}")]
    Undefined(String),

    /// Instance removed from analysis (e.g. response too short); not a failure.
    #[error("instance excluded: {0}")]
    Excluded(String),

    /// A report section would be empty.
    #[error("empty section: {0}")]
    EmptySection(String),

    /// Chat-completion backend failure.
    #[error("annotator backend: {0}")]
    Backend(String),

    /// Annotations required by a report are absent.
    #[error("missing annotations: {0}")]
    MissingAnnotations(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.as_ref().display().to_string(),
            line,
            message: message.into(),
        }
    }
}
