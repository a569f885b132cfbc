use std::time::Instant;

use fastweight_core::adapters::ridge_on_samples;
use fastweight_core::synthdata::{sigmoid, EpisodeTask, FeatureMap, Partition, Sample};
use nalgebra::DVector;
use serde::Serialize;

use crate::alloc;
use crate::config::RunConfig;
use crate::metrics::{split_metrics, SplitMetrics, DEFAULT_ECE_BINS};
use crate::prepare::Prepared;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Baseline {
    /// Ridge adapter fitted on the task's support set.
    SupportRidge,
    /// Linear rule between the support class means in feature space.
    NearestCentroid,
    /// Ridge fitted on the query set it is scored on.
    QueryRidgeOracle,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::SupportRidge, Baseline::NearestCentroid, Baseline::QueryRidgeOracle];

    pub fn label(self) -> &'static str {
        match self {
            Baseline::SupportRidge => "support-ridge",
            Baseline::NearestCentroid => "nearest-centroid",
            Baseline::QueryRidgeOracle => "query-ridge-oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineResult {
    pub method: &'static str,
    pub metrics: SplitMetrics,
    pub ms_per_task: f64,
    pub peak_bytes: Option<usize>,
}

fn class_mean(samples: &[Sample], fmap: &FeatureMap, y: u8) -> Option<DVector<f64>> {
    let members: Vec<DVector<f64>> = samples.iter().filter(|s| s.y == y).map(|s| fmap.apply(&s.x)).collect();
    if members.is_empty() {
        return None;
    }
    let n = members.len() as f64;
    Some(members.into_iter().fold(DVector::zeros(fmap.d_theta()), |a, b| a + b) / n)
}

/// Scores `p = sigmoid(phi . (m1 - m0) - (|m1|^2 - |m0|^2) / 2)`, the signed
/// half-difference of squared distances to the two class means. A missing
/// class leaves every score at 0.5.
pub fn nearest_centroid_scores(task: &EpisodeTask, fmap: &FeatureMap) -> Vec<f64> {
    match (class_mean(&task.support, fmap, 1), class_mean(&task.support, fmap, 0)) {
        (Some(m1), Some(m0)) => {
            let w = &m1 - &m0;
            let b = 0.5 * (m1.norm_squared() - m0.norm_squared());
            task.query.iter().map(|s| sigmoid(w.dot(&fmap.apply(&s.x)) - b)).collect()
        }
        _ => vec![0.5; task.query.len()],
    }
}

fn ridge_scores(train: &[Sample], task: &EpisodeTask, fmap: &FeatureMap, alpha: f64) -> Result<Vec<f64>> {
    let theta = ridge_on_samples(train, fmap, alpha)?;
    Ok(task.query.iter().map(|s| sigmoid(theta.dot(&fmap.apply(&s.x)))).collect())
}

pub fn baseline_scores(method: Baseline, task: &EpisodeTask, fmap: &FeatureMap, alpha: f64) -> Result<Vec<f64>> {
    match method {
        Baseline::SupportRidge => ridge_scores(&task.support, task, fmap, alpha),
        Baseline::NearestCentroid => Ok(nearest_centroid_scores(task, fmap)),
        Baseline::QueryRidgeOracle => ridge_scores(&task.query, task, fmap, alpha),
    }
}

/// Every baseline on the retrieval test split, tasks timed one at a time.
pub fn run_baselines(cfg: &RunConfig, prep: &Prepared) -> Result<Vec<BaselineResult>> {
    let tasks = prep.tasks_in(&[Partition::RetTest]);
    let fmap = &prep.corpus.feature_map;
    Baseline::ALL
        .iter()
        .map(|&method| {
            alloc::reset_peak();
            let mut per_task = Vec::with_capacity(tasks.len());
            let start = Instant::now();
            for t in &tasks {
                let p = baseline_scores(method, t, fmap, cfg.phase1.ridge_alpha)?;
                per_task.push((p, t.query.iter().map(|s| s.y).collect::<Vec<u8>>()));
            }
            let ms_per_task = start.elapsed().as_secs_f64() * 1e3 / tasks.len().max(1) as f64;
            Ok(BaselineResult {
                method: method.label(),
                metrics: split_metrics(&per_task, DEFAULT_ECE_BINS)?,
                ms_per_task,
                peak_bytes: alloc::peak_bytes(),
            })
        })
        .collect()
}
