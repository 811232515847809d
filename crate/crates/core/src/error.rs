use std::path::PathBuf;

use thiserror::Error;

use crate::config::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config line {line}: key `{key}`: {message}")]
    Parse {
        key: String,
        line: usize,
        message: String,
    },

    #[error("parameter validation failed: {0}")]
    Validation(ValidationReport),

    #[error("{equation}: solution blew up at node {node}")]
    BlowUp { equation: &'static str, node: usize },

    #[error("beta(t) is numerically singular at node {node} (condition number {condition:e})")]
    BetaSingular { node: usize, condition: f64 },

    #[error("degenerate fixed point: |1 - H0*Phi11(0)| = {denominator:e} is below the minimum")]
    DegenerateFixedPoint { denominator: f64 },

    #[error("identity check failed: {0}")]
    IdentityViolated(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::BlowUp { .. } | Error::BetaSingular { .. } | Error::IdentityViolated(_) => 3,
            Error::DegenerateFixedPoint { .. } => 4,
            Error::Io { .. } | Error::Parse { .. } | Error::InvalidArgument(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
