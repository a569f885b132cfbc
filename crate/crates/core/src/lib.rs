//! Prototype-conditioned fast weights for few-shot binary tasks.
//!
//! Per-task linear adapters are estimated by ridge regression, their spectrum
//! is used to pick an intrinsic dimension, and a frozen prototype dictionary is
//! built in the resulting PCA subspace. New tasks are served by a sparse,
//! nonnegative proximal retrieval over that dictionary, initialised from a
//! learned map of a fixed-length task descriptor.

pub mod adapters;
pub mod descriptors;
pub mod linalg;
pub mod prototypes;
pub mod retrieval;
pub mod riskbound;
pub mod seeds;
pub mod spectral;
pub mod stats;
pub mod synthdata;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("undefined quantity: {0}")]
    Undefined(String),
    #[error("leakage: {0}")]
    Leakage(String),
    #[error("prototype memory is frozen")]
    Frozen,
    #[error("prototype memory must be frozen before {0}")]
    NotFrozen(&'static str),
    #[error("objective diverged at iteration {iteration}")]
    Diverged { iteration: usize, trace: Vec<f64> },
    #[error(transparent)]
    Node(#[from] fastweight_node::NodeError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn ensure_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFinite(what.to_string()))
    }
}
