use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    /// The network simplex exhausted its pivot budget.
    #[error("transport solver did not converge after {iterations} pivots")]
    NonConvergence { iterations: u64 },

    #[error("instance too large for the exhaustive oracle: {0}")]
    OracleTooLarge(String),

    /// A correlation or regression is undefined (zero variance).
    #[error("undefined fit: {0}")]
    UndefinedFit(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit status for this error: 2 for bad input, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Parse { .. }
            | Error::OracleTooLarge(_)
            | Error::UndefinedFit(_)
            | Error::Json { .. } => 2,
            Error::NonConvergence { .. } | Error::Io { .. } => 1,
        }
    }
}
