use thiserror::Error;

use crate::state::{Action, UserId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("user {0} is not active in this period")]
    MissingUser(UserId),
    #[error("action map does not cover active user {0}")]
    UnservedUser(UserId),
    #[error("item {action} is not eligible in state {state}")]
    IneligibleItem { state: String, action: Action },
    #[error("operation requires the tabular backend")]
    UnsupportedInVectorMode,
    #[error("period {got} requested but the environment is at period {expected}")]
    PeriodMismatch { expected: u32, got: u32 },
    #[error("no Q estimate for item {action} in state {state}")]
    UndefinedQ { state: String, action: Action },
    #[error("contribution fraction undefined: blended score is zero")]
    ZeroDenominator,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("records stamped {got} but the buffer table expects period {expected}")]
    OutOfOrderPeriod { expected: u32, got: u32 },
    #[error("user {user} appears more than once in period {period}")]
    DuplicateRecord { user: UserId, period: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("scores are not pairwise distinct in state {state}")]
    NonUniqueScores { state: usize },
    #[error("invalid transition tuple: {0}")]
    InvalidTuple(String),
    #[error("metrics table is empty")]
    EmptyTable,
    #[error("malformed input: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
