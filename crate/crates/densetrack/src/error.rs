//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not line up; names the offending axis.
    #[error("shape mismatch on {axis}: expected {expected}, got {got} ({context})")]
    Shape {
        axis: &'static str,
        expected: String,
        got: String,
        context: &'static str,
    },

    /// A runtime argument is invalid (NaN coordinate, non-scalar loss, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration is internally inconsistent (channel counts, pyramid
    /// depth vs. resolution, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A file did not match its expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(
        axis: &'static str,
        expected: impl ToString,
        got: impl ToString,
        context: &'static str,
    ) -> Self {
        Error::Shape {
            axis,
            expected: expected.to_string(),
            got: got.to_string(),
            context,
        }
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
