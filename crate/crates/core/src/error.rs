use std::path::PathBuf;

use thiserror::Error;

use crate::policy::BridgeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("integration blew up: non-finite state at RK4 stage {stage}")]
    IntegrationBlowup { stage: usize },

    #[error("observer diverged: non-finite predictor state at t = {t}")]
    ObserverDivergence { t: f64 },

    #[error("estimation update off the sampling grid: t = {t}, sampling period = {period}")]
    Scheduling { t: f64, period: f64 },

    #[error("error bound computation failed: {0}")]
    BoundComputation(String),

    #[error("QP solver failed at step {step}: {reason}")]
    SolverFailed { step: usize, reason: String },

    #[error("policy bridge: {0}")]
    Bridge(#[from] BridgeError),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}
