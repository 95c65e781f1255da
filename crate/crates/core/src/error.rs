use std::path::PathBuf;

use crate::bayesopt::BoTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid actuator vector: {0}")]
    InvalidActuator(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("zero-norm vector has no direction")]
    DegenerateVector,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("pool has {available} candidates, {requested} requested")]
    InsufficientPool { available: usize, requested: usize },
    #[error("invalid items: {0}")]
    InvalidItems(String),
    #[error("answer for query {got} does not match pending query {expected:?}")]
    StaleAnswer { got: u64, expected: Option<u64> },
    #[error("winner {winner} is not part of query {query_id}")]
    InvalidWinner { query_id: u64, winner: u32 },
    #[error("rankings cover different item sets")]
    IncomparableRankings,
    #[error("invalid model input: {0}")]
    InvalidInput(String),
    #[error("no training data")]
    NoData,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },
    #[error("objective returned a non-finite value at iteration {iteration}")]
    AbortedRun { iteration: usize, trace: Box<BoTrace> },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("png encoding: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Error::Format { what: what.into(), detail: detail.to_string() }
    }
}
