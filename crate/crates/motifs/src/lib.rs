//! Motif screening and testing over synthetic sequence repertoires.
//!
//! Channels are k-mer motifs scored by their best sliding-window match. Null
//! repertoires come from a position-aware Markov background, p-values from
//! adaptive permutation counts, and multiplicity is handled with Storey's
//! null-proportion estimate and q-values. Channel thresholds are calibrated by
//! nested cross-validation with a small-sample stability t-test.

pub mod background;
pub mod channels;
pub mod fdr;
pub mod permutation;
pub mod synthetic;
pub mod tau;

use fastweight_core::CoreError;
use thiserror::Error;

pub use background::{MarkovBackground, Sequence};
pub use channels::Motif;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotifError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("symbol {symbol} in sequence {sequence} is outside the declared alphabet")]
    UnknownSymbol { symbol: u8, sequence: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("too few samples: {0}")]
    TooSmall(String),
    #[error("calibration did not converge after {attempts} attempts")]
    NotConverged {
        attempts: usize,
        last: Box<tau::TauCalibration>,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, MotifError>;
