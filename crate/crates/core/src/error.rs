use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{what} {value} out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("training diverged at step {step}: loss {loss} exceeded 10x the initial {initial} for 20 consecutive steps")]
    Divergence { step: usize, loss: f64, initial: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn out_of_range(
    what: &'static str,
    value: impl ToString,
    range: impl ToString,
) -> Error {
    Error::OutOfRange {
        what,
        value: value.to_string(),
        range: range.to_string(),
    }
}
