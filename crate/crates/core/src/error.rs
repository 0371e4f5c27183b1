use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("argument outside the domain of `{func}`: {value}")]
    Domain { func: &'static str, value: f64 },

    #[error("group {0} has no records")]
    EmptyGroup(usize),

    #[error("matrix is not positive definite (ridge lambda = {lambda})")]
    NotPositiveDefinite { lambda: f64 },

    #[error("entropy tie at the top between groups {0} and {1}; the instance is degenerate")]
    DegenerateGap(usize, usize),

    #[error("trial seed={seed} n={n} minority={minority}: {source}")]
    Trial {
        seed: u64,
        n: usize,
        minority: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
