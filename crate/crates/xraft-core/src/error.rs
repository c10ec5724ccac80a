use thiserror::Error;

/// Errors produced by the flow toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape violation, with a description of the offending shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed file contents.
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    /// I/O failure, tagged with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Loss became non-finite during training.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A masked reduction found no supervisable pixels.
    #[error("no supervisable pixels")]
    EmptyMask,

    /// Precondition violation that is not a shape problem.
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
