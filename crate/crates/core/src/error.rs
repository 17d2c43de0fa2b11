use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("data error at row {row}, column `{column}`: {message}")]
    DataCell {
        /// 1-based data row (the header is row 0).
        row: usize,
        column: String,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("e-step: all component likelihoods vanish for observation {0}")]
    DegenerateResponsibilities(usize),

    #[error("weighted probit failed for group {group}: {reason}")]
    ProbitFailure { group: usize, reason: String },

    #[error("all {n_starts} EM starts failed: {reasons}")]
    AllStartsFailed { n_starts: usize, reasons: String },

    #[error("mixture fit is not identified (component {group} has pi = {pi:.3e}); pass force to override")]
    NonIdentified { group: usize, pi: f64 },

    #[error("least-squares solver failed: {0}")]
    Solver(String),

    #[error("instrument cell `{0}` is empty")]
    EmptyCell(String),

    #[error("zero first stage: treatment rates are equal ({0}) in both cells")]
    ZeroFirstStage(f64),

    #[error("monte carlo aborted: {failed} of {replications} replications failed")]
    McAbort { failed: usize, replications: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
