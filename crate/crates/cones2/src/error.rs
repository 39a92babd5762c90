//! Error type shared across the crate.
//!
//! Errors are grouped so the CLI can map them onto stable exit codes:
//! validation failures (2), numerical failures (3) and I/O or file-format
//! failures (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A word that is not part of the vocabulary.
    #[error("out-of-vocabulary word: {0:?}")]
    UnknownWord(String),

    /// Tokenized prompt does not fit the context length.
    #[error("prompt needs {needed} slots but context length is {limit}")]
    PromptTooLong { needed: usize, limit: usize },

    /// Template/filler product too small for the requested corpus size.
    #[error("corpus capacity exceeded: product has {available} sentences, {requested} requested")]
    CorpusCapacity { available: usize, requested: usize },

    /// Generic validation failure (bad arguments, mismatched shapes, bad config).
    #[error("{0}")]
    Validation(String),

    /// An attention editor returned logits of the wrong shape.
    #[error("attention editor returned shape {got:?}, expected {expected:?}")]
    EditorShape { expected: Vec<usize>, got: Vec<usize> },

    /// Residual binding refers to a word absent from the prompt.
    #[error("bound word {0:?} does not occur in the prompt")]
    BindingWordAbsent(String),

    /// Two bindings cover the same token occurrence.
    #[error("duplicate binding for word {0:?}")]
    DuplicateBinding(String),

    /// A box rasterizes to zero cells at some attention resolution.
    #[error("degenerate box for subject {subject:?} at resolution {h}x{w}")]
    DegenerateBox { subject: String, h: usize, w: usize },

    /// Non-finite loss or parameter detected.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Registry or checkpoint bytes fail their integrity check.
    #[error("corrupt file {path:?}: {reason}")]
    Corrupt { path: String, reason: String },

    /// Registry entry missing.
    #[error("registry entry not found: {0:?}")]
    MissingEntry(String),

    /// Stored vector width does not match the current encoder.
    #[error("residual has d_text {stored} but encoder expects {expected}")]
    DTextMismatch { stored: usize, expected: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 2 validation, 3 numerical, 4 I/O or corrupt data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            Error::Io(_) | Error::Json(_) | Error::Corrupt { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
