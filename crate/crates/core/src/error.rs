use std::path::PathBuf;

use crate::driver::ChainOutput;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("parse error at row {row}, column `{column}`: {reason}")]
    Parse { row: usize, column: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(
        "chain diverged at iteration {} (step size {:e}, gradient norm {:e})",
        .0.iteration, .0.step_size, .0.gradient_norm
    )]
    Divergence(Box<DivergenceReport>),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite score at sample {sample}, coordinate {coordinate}")]
    NonFiniteScore { sample: usize, coordinate: usize },

    #[error("problem too large: {0}")]
    TooLarge(String),
}

/// Context attached to a divergence failure. `partial` holds whatever the
/// chain had recorded before the failing iteration.
#[derive(Debug)]
pub struct DivergenceReport {
    pub iteration: usize,
    pub step_size: f64,
    pub gradient_norm: f64,
    pub partial: Option<ChainOutput>,
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter { .. } => "parameter",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Divergence(_) => "divergence",
            Error::LinearAlgebra(_) => "linear_algebra",
            Error::Contract(_) => "contract",
            Error::NonFiniteScore { .. } => "non_finite_score",
            Error::TooLarge(_) => "too_large",
        }
    }
}
