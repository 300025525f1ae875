use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of range or a config file is malformed.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input file, with the 1-based line number that failed.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("resource error: {0}")]
    Resource(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
