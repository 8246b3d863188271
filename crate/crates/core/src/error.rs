use std::path::PathBuf;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// bad arguments/config -> 2, data/IO problems -> 3, numerical aborts -> 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("grid spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("bad config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
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
