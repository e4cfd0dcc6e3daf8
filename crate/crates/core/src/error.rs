use thiserror::Error;

use crate::allocation::AllocationError;
use crate::datamodel::LedgerError;
use crate::fpca::FpcaError;
use crate::imputation::ImputationError;
use crate::models::ModelError;
use crate::multiframe::MultiframeError;
use crate::raking::RakingError;

/// Crate-level error used by the workflow, the file formats and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Raking(#[from] RakingError),
    #[error(transparent)]
    Multiframe(#[from] MultiframeError),
    #[error(transparent)]
    Imputation(#[from] ImputationError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: row {row}: {message}")]
    Parse { file: String, row: usize, message: String },
    #[error("{file}: column `{column}`: {message}")]
    Schema { file: String, column: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Coarse error classes; the CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Parse,
    Infeasible,
    Numerical,
    Invalid,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Io => "io",
            ErrorClass::Parse => "parse",
            ErrorClass::Infeasible => "infeasible",
            ErrorClass::Numerical => "numerical",
            ErrorClass::Invalid => "invalid",
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Parse { .. } | Error::Schema { .. } => ErrorClass::Parse,
            Error::Allocation(e) if e.is_infeasible() => ErrorClass::Infeasible,
            Error::Raking(RakingError::Infeasible { .. }) => ErrorClass::Infeasible,
            Error::Model(_) | Error::Fpca(_) | Error::Raking(_) | Error::Imputation(_) => ErrorClass::Numerical,
            _ => ErrorClass::Invalid,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
