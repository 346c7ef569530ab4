use thiserror::Error;

use crate::numkit::NumError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("unknown environment `{0}` (expected one of: boyan, dependent, inverted, tabular, baird)")]
    UnknownEnvironment(String),
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("behavior chain is reducible: {0}")]
    ReducibleChain(String),
    #[error("value equations are singular: {0}")]
    SingularSystem(String),
    #[error("A is singular, the TD fixed point is undefined")]
    SingularA,
    #[error("C is singular")]
    SingularC,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
