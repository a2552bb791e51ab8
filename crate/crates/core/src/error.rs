use thiserror::Error;

use crate::model::ValidationReport;
use crate::perturb::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid financial system:\n{0}")]
    Invalid(ValidationReport),

    #[error("{0}")]
    InvalidArgument(String),

    /// Some risk orbit carries no external assets; the clearing vector is not unique.
    #[error("system is not regular: risk orbit {witness:?} holds no external assets")]
    NonRegular { witness: Vec<usize> },

    /// A bank sits exactly on the default threshold, where the clearing
    /// vector is not differentiable.
    #[error("bank {bank} is at the brink of default (x + inflow - p_bar = {gap:e})")]
    Boundary { bank: usize, gap: f64 },

    #[error("inadmissible perturbation: {}", format_violations(.0))]
    Inadmissible(Vec<Violation>),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::Parse(_)
            | Error::Dimension(_)
            | Error::Invalid(_)
            | Error::InvalidArgument(_) => 1,
            Error::NonRegular { .. } => 2,
            Error::Boundary { .. } => 3,
            Error::Inadmissible(_) => 4,
            Error::Numeric(_) => 5,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
