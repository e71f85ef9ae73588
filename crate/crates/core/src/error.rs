use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: node {left} has shape {left_shape:?}, node {right} has shape {right_shape:?}")]
    ShapeMismatch {
        op: &'static str,
        left: usize,
        left_shape: Vec<usize>,
        right: usize,
        right_shape: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("backward requires a scalar root, node {node} has shape {shape:?}")]
    NonScalarRoot { node: usize, shape: Vec<usize> },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("CTC target of {target_len} tokens needs at least {required} frames, got {frames}")]
    Infeasible {
        frames: usize,
        target_len: usize,
        required: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("manifest line {line}: utterance `{id}` contains unknown character {ch:?}")]
    UnknownCharacter { id: String, ch: char, line: usize },

    #[error("manifest line {line}: duplicate utterance id `{id}`")]
    DuplicateId { id: String, line: usize },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err: source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input data rather than bad usage or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format { .. }
                | Error::UnknownCharacter { .. }
                | Error::DuplicateId { .. }
                | Error::Validation(_)
                | Error::Infeasible { .. }
                | Error::Dimension { .. }
                | Error::EmptyInput(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
