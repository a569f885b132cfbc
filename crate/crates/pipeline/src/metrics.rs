use fastweight_core::stats::{auc, mean, sample_std};
use serde::{Deserialize, Serialize};

use crate::{PipelineError, Result};

pub const DEFAULT_ECE_BINS: usize = 10;
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.n() as f64
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    /// `2 tp / (2 tp + fp + fn)`, zero when there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
        }
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Predictions at or above the threshold are positive.
pub fn confusion(probabilities: &[f64], labels: &[u8]) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &y) in probabilities.iter().zip(labels) {
        match (p >= DECISION_THRESHOLD, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_prob: f64,
    pub frac_pos: f64,
}

/// Equal-width bins over `[0, 1]`; bin `i` holds `[i/n, (i+1)/n)` and the
/// last bin also holds 1. Empty bins report zeros.
pub fn calibration_bins(probabilities: &[f64], labels: &[u8], n_bins: usize) -> Vec<CalibrationBin> {
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&p, &y) in probabilities.iter().zip(labels) {
        let b = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        sum_p[b] += p;
        sum_y[b] += f64::from(y);
        count[b] += 1;
    }
    (0..n_bins)
        .map(|b| CalibrationBin {
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            mean_prob: if count[b] > 0 { sum_p[b] / count[b] as f64 } else { 0.0 },
            frac_pos: if count[b] > 0 { sum_y[b] / count[b] as f64 } else { 0.0 },
        })
        .collect()
}

pub fn ece(bins: &[CalibrationBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .map(|b| b.count as f64 / n as f64 * (b.mean_prob - b.frac_pos).abs())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub n: usize,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub auc: f64,
    pub ece: f64,
    pub health_mean: f64,
    pub health_std: f64,
    /// Subjects with health score below 0.5, i.e. predicted positive.
    pub high_risk: usize,
    pub bins: Vec<CalibrationBin>,
}

/// Threshold-0.5 confusion metrics, rank AUC, equal-width ECE and the health
/// score `1 - p`.
pub fn compute_metrics(probabilities: &[f64], labels: &[u8], n_bins: usize) -> Result<MetricsRecord> {
    if probabilities.len() != labels.len() {
        return Err(PipelineError::Metrics("probabilities and labels differ in length".into()));
    }
    if probabilities.is_empty() || n_bins == 0 {
        return Err(PipelineError::Metrics("need predictions and at least one bin".into()));
    }
    if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(PipelineError::Metrics("probabilities must lie in [0, 1]".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(PipelineError::Metrics("labels must be 0 or 1".into()));
    }
    let auc = auc(probabilities, labels)?;
    let c = confusion(probabilities, labels);
    let bins = calibration_bins(probabilities, labels, n_bins);
    let health: Vec<f64> = probabilities.iter().map(|p| 1.0 - p).collect();
    Ok(MetricsRecord {
        n: probabilities.len(),
        confusion: c,
        accuracy: c.accuracy(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        f1: c.f1(),
        auc,
        ece: ece(&bins),
        health_mean: mean(&health),
        health_std: if health.len() > 1 { sample_std(&health) } else { 0.0 },
        high_risk: c.tp + c.fp,
        bins,
    })
}

/// Pooled metrics over several tasks plus the mean of per-task AUCs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub pooled: MetricsRecord,
    pub auc_task_mean: f64,
    pub per_task_auc: Vec<f64>,
}

pub fn split_metrics(per_task: &[(Vec<f64>, Vec<u8>)], n_bins: usize) -> Result<SplitMetrics> {
    if per_task.is_empty() {
        return Err(PipelineError::Metrics("no tasks".into()));
    }
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut aucs = Vec::with_capacity(per_task.len());
    for (p, y) in per_task {
        aucs.push(auc(p, y)?);
        probs.extend_from_slice(p);
        labels.extend_from_slice(y);
    }
    Ok(SplitMetrics {
        pooled: compute_metrics(&probs, &labels, n_bins)?,
        auc_task_mean: mean(&aucs),
        per_task_auc: aucs,
    })
}
