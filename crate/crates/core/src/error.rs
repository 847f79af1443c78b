use thiserror::Error;

/// Errors produced by the synthesis toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {block}: expected {expected}, found {found}")]
    DimensionMismatch {
        block: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Simulation left the divergence guard. `index` names the batch member when known.
    #[error("trajectory diverged at t = {time}{}", index.map(|i| format!(" (initial state #{i})")).unwrap_or_default())]
    Divergence { time: f64, index: Option<usize> },

    #[error("certification problem is infeasible")]
    Infeasible,

    #[error("SDP solver did not converge: {0}")]
    Solver(String),

    #[error("certificate failed verification: {0}")]
    Verification(String),

    #[error("shell sampler acceptance rate {rate:.2e} below 1e-4 after {attempts} draws")]
    SamplerStarved { rate: f64, attempts: usize },

    /// Malformed configuration; `path` is the JSON path of the offending field.
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(block: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            block: block.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Attach a batch index to a divergence error.
    pub fn with_index(self, idx: usize) -> Self {
        match self {
            Error::Divergence { time, .. } => Error::Divergence {
                time,
                index: Some(idx),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
