//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. The CLI maps variants to
//! stable process exit codes (see [`Error::exit_code`]): configuration
//! problems exit 2, numeric aborts exit 3, everything else exits 1.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    #[error("token {token} out of range for vocab of size {vocab_size}")]
    InvalidToken { token: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("enumeration would visit {needed} outcomes, cap is {cap}")]
    EnumerationCap { needed: u128, cap: u64 },

    #[error("unknown prompt id {0}")]
    UnknownPrompt(u32),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("samples in a group must share one prompt (found ids {first} and {other})")]
    MixedGroup { first: u32, other: u32 },

    #[error("degenerate importance weight: log-weight {log_weight:.3} outside +/-{limit}")]
    DegenerateWeight { log_weight: f64, limit: f64 },

    #[error("non-finite gradient at outer step {outer}, inner step {inner}")]
    NonFiniteGradient {
        outer: usize,
        inner: usize,
        /// JSON dump of the offending mini-batch, for post-mortems.
        dump: String,
    },

    #[error("pass@k needs at least k generations per prompt (got {g}, k={k})")]
    PassAtKArity { g: usize, k: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("verification failed: {0}")]
    VerifyFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code for this error.
    ///
    /// 2 = configuration error, 3 = numeric abort, 1 = any other failure
    /// (0 is reserved for success and never returned here).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFiniteGradient { .. } => 3,
            _ => 1,
        }
    }

    /// Shorthand for a [`Error::Config`] with a formatted message.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(Error::config("bad").exit_code(), 2);
        assert_eq!(
            Error::NonFiniteGradient { outer: 0, inner: 0, dump: String::new() }.exit_code(),
            3
        );
        assert_eq!(Error::EmptyBatch.exit_code(), 1);
        assert_eq!(Error::UnknownTask("x".into()).exit_code(), 1);
    }
}
