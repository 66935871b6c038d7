use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("expression is empty")]
    EmptyExpression,

    #[error("token sequence is empty")]
    EmptyText,

    #[error("token sequence of length {len} exceeds max_len {max_len}")]
    TextTooLong { len: usize, max_len: usize },

    #[error("every text token is padding (row {row})")]
    AllMasked { row: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("evaluation set is empty")]
    EmptyEvaluation,

    #[error("ambiguous scene: {0}")]
    AmbiguousScene(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}; diagnostics written to {dump:?}")]
    NonFiniteLoss { step: usize, dump: PathBuf },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
