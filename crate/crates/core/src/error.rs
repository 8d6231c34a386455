use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates an invariant. `field` names the
    /// offending key as it appears in the scenario file.
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A block would exceed the configured block-cut limits.
    #[error("block policy violation: {0}")]
    Policy(String),

    /// A transfer over a link with zero capacity.
    #[error("link is unreachable (zero rate)")]
    UnreachableLink,

    #[error("malformed chain dump at line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error("failed to parse scenario: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn contract(reason: impl Into<String>) -> Self {
        Error::Contract(reason.into())
    }
}
