use thiserror::Error;

use crate::netmodel::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid combination matrix: {0}")]
    Combination(Violation),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unstable recursion: spectral radius {radius:.8} >= 1")]
    Instability { radius: f64 },

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("numerical divergence at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
