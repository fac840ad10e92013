use thiserror::Error;

use crate::fedsgd::RoundRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape error: expected dimension {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Training produced a non-finite or exploding parameter. `partial` holds
    /// every record completed before the failing round.
    #[error("diverged at round {round}: {reason}")]
    Divergence {
        round: usize,
        reason: String,
        partial: Vec<RoundRecord>,
    },

    #[error("gradient coherence undefined: all {skipped} rounds fall below the norm guard")]
    UndefinedCoherence { skipped: usize },

    #[error("bound inapplicable: 1 - (1 - mu) * beta = {0} is not positive")]
    BoundInapplicable(f64),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error: 3 for anything the user can fix in the
    /// configuration, 4 for numeric divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Shape { .. }
            | Error::Domain(_)
            | Error::Mode(_)
            | Error::BoundInapplicable(_) => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape { expected, actual })
    }
}
