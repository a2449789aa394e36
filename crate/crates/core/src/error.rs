use thiserror::Error;

/// Errors raised anywhere in the testbed.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("value does not fit the plaintext space: {0}")]
    EncodingOverflow(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed encoding: {0}")]
    Format(String),
    #[error("incomplete shard set: {0}")]
    ShardSetIncomplete(String),
    #[error("secret is not smaller than the field prime")]
    FieldOverflow,
    #[error("threshold not met: {needed} shares required, {got} available")]
    ThresholdNotMet { needed: usize, got: usize },
    #[error("duplicate share with x = {0}")]
    DuplicateShare(String),
    #[error("no registered credential satisfies the policy")]
    NoEligibleRecipient,
    #[error("credential attributes do not satisfy the policy")]
    PolicyUnsatisfied,
    #[error("authentication failed")]
    AuthFailure,
    #[error("credential does not verify under the authority key")]
    CredentialInvalid,
    #[error("timestamp token failed verification")]
    TamperedToken,
    #[error("clock skew: end time {end_ms} ms precedes start time {start_ms} ms")]
    ClockSkew { start_ms: i64, end_ms: i64 },
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),
    #[error("timestamp authority unreachable")]
    TsaUnreachable,
    #[error("no node is eligible for rewards")]
    NoEligibleNodes,
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
