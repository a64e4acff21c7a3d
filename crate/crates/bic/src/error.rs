use thiserror::Error;

/// Errors surfaced by the incremental-learning engine.
#[derive(Debug, Error)]
pub enum BicError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl BicError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        BicError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, BicError>;
