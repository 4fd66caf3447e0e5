//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a tensor op; names the op and the offending shapes.
    #[error("shape error in `{op}`: {details}")]
    Shape { op: &'static str, details: String },

    /// Value outside the mathematical domain of an operation.
    #[error("domain error in `{op}`: {details}")]
    Domain { op: &'static str, details: String },

    /// Invalid configuration; lists every violation found.
    #[error("invalid config: {0}")]
    Config(String),

    /// Dataset schema violation, names the offending record.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint file malformed or inconsistent with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (e.g. non-finite loss) with a diagnostic.
    #[error("training aborted: {0}")]
    Train(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Msg(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub fn domain(op: &'static str, details: impl Into<String>) -> Self {
        Error::Domain {
            op,
            details: details.into(),
        }
    }
}
