use thiserror::Error;

/// Errors raised by geometry, scenario and model evaluation code.
///
/// Solver failures that carry a best iterate live in [`crate::newton::SolveError`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid problem description. `path` names the offending key or object.
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// An argument outside the mathematical domain of a model function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Arrays whose sizes do not agree with the grid or time discretization.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    /// A non-finite value appeared while evaluating a residual.
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("invalid input: {0}")]
    Input(String),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
