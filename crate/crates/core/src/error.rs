use std::fmt;

use crate::solvers::SolveReport;

/// Which nonlinear solve produced a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rho,
    U,
    Picard,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Rho => write!(f, "rho"),
            Stage::U => write!(f, "u"),
            Stage::Picard => write!(f, "picard"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("{stage} solve did not converge after {} iterations", report.iterations)]
    NonConvergence {
        stage: Stage,
        report: Box<SolveReport>,
    },

    #[error("line search failed in {stage} solve after {} iterations", report.iterations)]
    LineSearch {
        stage: Stage,
        report: Box<SolveReport>,
    },

    #[error("matrix is not positive definite (curvature {0:e})")]
    NotPositiveDefinite(f64),

    #[error("positivity lost: {0}")]
    Positivity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// The solve report attached to a solver failure, if any.
    pub fn report(&self) -> Option<&SolveReport> {
        match self {
            Error::NonConvergence { report, .. } | Error::LineSearch { report, .. } => Some(report),
            _ => None,
        }
    }

    /// Retag a solver failure with the stage it originated from.
    pub fn with_stage(self, stage: Stage) -> Self {
        match self {
            Error::NonConvergence { report, .. } => Error::NonConvergence { stage, report },
            Error::LineSearch { report, .. } => Error::LineSearch { stage, report },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
