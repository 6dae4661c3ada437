//! Crate-wide error type and result alias.

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
///
/// The variants mirror the failure classes the tools distinguish at the
/// process boundary: bad inputs (`Config`, `Usage`, `Parse`) exit with code 1,
/// everything that goes wrong mid-run exits with code 2.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its documented domain.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with arguments that violate its contract,
    /// e.g. sequences over mismatched vocabularies.
    #[error("usage error: {0}")]
    Usage(String),

    /// A metric has no defined value for the given input (empty reference,
    /// empty pair list).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A statistic has no defined value for the given input (fewer than three
    /// correlation points, zero variance).
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    /// The objective or its gradient stopped being finite; the update that
    /// produced it is aborted rather than applied.
    #[error("non-finite {quantity} at update {step}")]
    NonFinite { step: usize, quantity: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// A pipeline stage failed for a reason other than bad user input.
    #[error("run failure: {0}")]
    Run(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code the CLI maps this error to: 1 for rejected input,
    /// 2 for failures during an accepted run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Usage(_)
            | Error::Parse { .. }
            | Error::UndefinedMetric(_)
            | Error::UndefinedStatistic(_) => 1,
            Error::NonFinite { .. } | Error::Io { .. } | Error::Run(_) => 2,
        }
    }
}
