use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// `Config`/`Shape` are caller mistakes (exit 2), `Io`/`Format` are
/// filesystem problems (exit 3), `Numeric` is a runtime numerical failure
/// (exit 4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: {details}")]
    Shape { op: &'static str, details: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {details}")]
    Format { path: PathBuf, details: String },

    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub fn config(details: impl Into<String>) -> Self {
        Error::Config(details.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, details: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            details: details.into(),
        }
    }

    pub fn numeric(details: impl Into<String>) -> Self {
        Error::Numeric(details.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
