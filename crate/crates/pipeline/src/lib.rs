//! End-to-end runs of the prototype fast-weight pipeline.
//!
//! Phase 1 builds and certifies a frozen prototype memory from pretraining
//! adapters; phase 2 trains the descriptor-to-activation retrieval map and
//! evaluates it on held-out tasks. Baselines, ablations, the motif study and
//! the risk-bound check share the same corpus preparation and metric code,
//! and every stage writes CSV artifacts into a report bundle.

pub mod ablate;
pub mod alloc;
pub mod baselines;
pub mod config;
pub mod metrics;
pub mod motif_study;
pub mod phase1;
pub mod phase2;
pub mod prepare;
pub mod report;
pub mod riskbound_run;
pub mod run;
pub mod runlog;

use fastweight_core::CoreError;
use fastweight_motifs::MotifError;
use thiserror::Error;

pub use config::{Ablation, RunConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o failure at {0}: {1}")]
    Io(String, String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Motif(#[from] MotifError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Tags a failure with the pipeline stage it came from.
pub fn stage<T, E: Into<PipelineError>>(name: &'static str, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| PipelineError::Stage {
        stage: name,
        source: Box::new(e.into()),
    })
}
