use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid trace: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("samples out of time order at index {index}: {previous} > {current}")]
    Ordering { index: usize, previous: i64, current: i64 },

    #[error("no frequency entry for group (attended={attended}, user={user}, category={category})")]
    UnseenGroup {
        attended: bool,
        user: String,
        category: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("schema hash mismatch: model expects {expected}, data has {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
