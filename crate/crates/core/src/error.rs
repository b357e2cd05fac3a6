use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so a front end can map them onto exit codes:
/// configuration problems, data/IO problems and numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty model: every dimension must be at least 1 ({0})")]
    EmptyModel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("position {position} exceeds max_position {max_position}")]
    PositionOverflow { position: usize, max_position: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
