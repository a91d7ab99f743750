use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Coarse error classes surfaced by the CLI as machine-readable categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Config,
    Schema,
    Rank,
    Convergence,
    Infeasible,
    Reliability,
    Io,
}

impl ErrorCategory {
    /// Process exit status: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Schema | ErrorCategory::Io => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Schema => "schema",
            ErrorCategory::Rank => "rank",
            ErrorCategory::Convergence => "convergence",
            ErrorCategory::Infeasible => "infeasible",
            ErrorCategory::Reliability => "reliability",
            ErrorCategory::Io => "io",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("schema error: {0}")]
    Header(String),

    #[error("consistency error at row {row}: observed flag is 1 but the outcome is missing")]
    Consistency { row: usize },

    #[error("outcome at row {row} is not observed")]
    MaskedOutcome { row: usize },

    #[error("rank deficient {what}; dependent columns: {}", .dependent.join(", "))]
    Rank { what: String, dependent: Vec<String> },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("perfect prediction or constant response: {0}")]
    Separation(String),

    #[error("no convergence after {iterations} iterations (score norm {score_norm:e})")]
    Convergence {
        iterations: usize,
        score_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("estimation infeasible: {0}")]
    Infeasible(String),

    #[error("outcome outside the range of the {family} family at row {row}")]
    Range { family: String, row: usize },

    #[error("density estimate {density:e} at the quantile is too small for a stable influence function")]
    Instability { density: f64 },

    #[error("{failed} of {total} replicates failed")]
    Reliability { failed: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Schema { .. }
            | Error::Header(_)
            | Error::Consistency { .. }
            | Error::MaskedOutcome { .. }
            | Error::Range { .. }
            | Error::Csv(_) => ErrorCategory::Schema,
            Error::Rank { .. } | Error::Singular(_) => ErrorCategory::Rank,
            Error::Separation(_) | Error::Convergence { .. } | Error::Instability { .. } => {
                ErrorCategory::Convergence
            }
            Error::Infeasible(_) => ErrorCategory::Infeasible,
            Error::Reliability { .. } => ErrorCategory::Reliability,
            Error::Config(_) | Error::Json(_) => ErrorCategory::Config,
            Error::Io(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
