use thiserror::Error;

/// Errors produced by the attention, layout, position, engine and cost routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty softmax row")]
    EmptySoftmaxRow,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unattended query: row {row} has no allowed key")]
    UnattendedQuery { row: usize },

    #[error("hidden size {hidden} is not divisible by {heads} heads")]
    HeadSplit { hidden: usize, heads: usize },

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("invalid position configuration: {0}")]
    Position(String),

    #[error("invalid method configuration: {0}")]
    Method(String),

    #[error("context block {index}: {source}")]
    Block {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("kv cache: {0}")]
    Cache(String),

    #[error("operation count overflow in {0}")]
    Overflow(&'static str),

    #[error("inconsistent cost parameters: {0}")]
    Cost(String),

    #[error("invalid trace request: {0}")]
    Trace(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
