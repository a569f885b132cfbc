use fastweight_core::seeds::stream;
use fastweight_core::stats::auc;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{MotifError, Result};

pub const INNER_FOLDS: usize = 3;
pub const DEFAULT_GRID: (f64, f64) = (0.1, 0.9);
pub const DEFAULT_GRID_POINTS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauConfig {
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    pub calib_frac: f64,
    pub gap_bound: f64,
    pub alpha: f64,
    /// Fraction by which the grid width shrinks after a failed t-test.
    pub shrink: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for TauConfig {
    fn default() -> Self {
        Self {
            grid_lo: DEFAULT_GRID.0,
            grid_hi: DEFAULT_GRID.1,
            grid_points: DEFAULT_GRID_POINTS,
            calib_frac: 0.2,
            gap_bound: 0.01,
            alpha: 0.05,
            shrink: 0.2,
            max_attempts: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityTest {
    pub t: Option<f64>,
    pub p_two_sided: Option<f64>,
    pub p_one_sided: Option<f64>,
    pub zero_variance: bool,
}

/// Mean of the inner optima and `SE = sqrt(sum (tau_k - mean)^2 / (n (n - 1)))`.
pub fn inner_summary(taus: &[f64]) -> Result<(f64, f64)> {
    if taus.len() < 2 {
        return Err(MotifError::TooSmall("need at least two inner optima".into()));
    }
    if taus.iter().all(|&t| t == taus[0]) {
        return Ok((taus[0], 0.0));
    }
    let n = taus.len() as f64;
    let mean = taus.iter().sum::<f64>() / n;
    let ss: f64 = taus.iter().map(|t| (t - mean).powi(2)).sum();
    Ok((mean, (ss / (n * (n - 1.0))).sqrt()))
}

/// `t = (tau_bar - center) / (SE / sqrt(folds))` against a t distribution
/// with `folds - 1` degrees of freedom. A zero SE leaves `t` undefined.
pub fn stability_test(tau_bar: f64, se: f64, center: f64, folds: usize) -> Result<StabilityTest> {
    if folds < 2 || !tau_bar.is_finite() || !(se >= 0.0 && se.is_finite()) {
        return Err(MotifError::InvalidConfig("stability test needs finite inputs and >= 2 folds".into()));
    }
    if se == 0.0 {
        return Ok(StabilityTest {
            t: None,
            p_two_sided: None,
            p_one_sided: None,
            zero_variance: true,
        });
    }
    let t = (tau_bar - center) / (se / (folds as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (folds - 1) as f64)
        .map_err(|e| MotifError::InvalidConfig(format!("t distribution: {e}")))?;
    let upper = 1.0 - dist.cdf(t.abs());
    Ok(StabilityTest {
        t: Some(t),
        p_two_sided: Some((2.0 * upper).min(1.0)),
        p_one_sided: Some(upper),
        zero_variance: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCalibration {
    pub cohort: String,
    pub inner_taus: Vec<f64>,
    pub tau_bar: f64,
    pub se: f64,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub p_one_sided: Option<f64>,
    pub zero_variance: bool,
    pub calib_auc: f64,
    pub test_auc: f64,
    pub delta_auc: f64,
    pub pass: bool,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_center: f64,
    pub attempts: usize,
    pub df: usize,
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

fn threshold_auc(scores: &[f64], labels: &[u8], idx: &[usize], tau: f64) -> Result<f64> {
    let ind: Vec<f64> = idx.iter().map(|&i| if scores[i] >= tau { 1.0 } else { 0.0 }).collect();
    let lab: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
    Ok(auc(&ind, &lab)?)
}

/// Grid point with the best AUC; ties go to the point nearest the grid
/// centre, then to the lower value.
fn best_tau(scores: &[f64], labels: &[u8], idx: &[usize], candidates: &[f64], center: f64) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &tau in candidates {
        let a = threshold_auc(scores, labels, idx, tau)?;
        let better = match best {
            None => true,
            Some((bt, ba)) => a > ba + 1e-12 || ((a - ba).abs() <= 1e-12 && (tau - center).abs() < (bt - center).abs() - 1e-12),
        };
        if better {
            best = Some((tau, a));
        }
    }
    Ok(best.map(|b| b.0).unwrap_or(center))
}

struct Split {
    calib: Vec<usize>,
    test: Vec<usize>,
    folds: Vec<Vec<usize>>,
}

fn stratified_split(labels: &[u8], cfg: &TauConfig, round: u64) -> Result<Split> {
    let mut rng = stream(cfg.seed, "tau-split", round);
    let mut calib = Vec::new();
    let mut test = Vec::new();
    let mut folds = vec![Vec::new(); INNER_FOLDS];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_cal = ((cfg.calib_frac * members.len() as f64).round() as usize).max(INNER_FOLDS);
        if n_cal >= members.len() {
            return Err(MotifError::TooSmall(format!(
                "class {class} has {} samples, too few for a {INNER_FOLDS}-fold calibration split",
                members.len()
            )));
        }
        for (j, &i) in members[..n_cal].iter().enumerate() {
            folds[j % INNER_FOLDS].push(i);
        }
        calib.extend_from_slice(&members[..n_cal]);
        test.extend_from_slice(&members[n_cal..]);
    }
    calib.sort_unstable();
    test.sort_unstable();
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(Split { calib, test, folds })
}

/// Nested cross-validated threshold for one channel. Scores are compared
/// against thresholds on the grid; the inner optima feed the stability test,
/// a failed test narrows the grid around their mean, and a calibration/test
/// AUC gap above the bound draws a fresh split.
pub fn calibrate_tau(cohort: &str, scores: &[f64], labels: &[u8], cfg: &TauConfig) -> Result<TauCalibration> {
    if scores.len() != labels.len() {
        return Err(MotifError::InvalidConfig("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MotifError::NonFinite("channel scores".into()));
    }
    if !(cfg.grid_lo < cfg.grid_hi && cfg.grid_points >= 1 && cfg.calib_frac > 0.0 && cfg.calib_frac < 1.0) {
        return Err(MotifError::InvalidConfig("bad calibration grid or split".into()));
    }
    if cfg.max_attempts == 0 || !(cfg.shrink > 0.0 && cfg.shrink < 1.0) {
        return Err(MotifError::InvalidConfig("need max_attempts >= 1 and shrink in (0, 1)".into()));
    }
    let mut round = 0u64;
    let mut split = stratified_split(labels, cfg, round)?;
    let (mut lo, mut hi) = (cfg.grid_lo, cfg.grid_hi);
    let mut last: Option<TauCalibration> = None;
    for attempt in 1..=cfg.max_attempts {
        let center = 0.5 * (lo + hi);
        let candidates = grid(lo, hi, cfg.grid_points);
        let mut inner = Vec::with_capacity(INNER_FOLDS);
        for k in 0..INNER_FOLDS {
            let train: Vec<usize> = split.calib.iter().copied().filter(|i| !split.folds[k].contains(i)).collect();
            inner.push(best_tau(scores, labels, &train, &candidates, center)?);
        }
        let (tau_bar, se) = inner_summary(&inner)?;
        let test = stability_test(tau_bar, se, center, INNER_FOLDS)?;
        let t_pass = test.zero_variance || test.p_two_sided.is_some_and(|p| p >= cfg.alpha);
        let calib_auc = threshold_auc(scores, labels, &split.calib, tau_bar)?;
        let test_auc = threshold_auc(scores, labels, &split.test, tau_bar)?;
        let delta_auc = (calib_auc - test_auc).abs();
        let gap_pass = delta_auc <= cfg.gap_bound;
        let record = TauCalibration {
            cohort: cohort.to_string(),
            inner_taus: inner,
            tau_bar,
            se,
            t_stat: test.t,
            p_value: test.p_two_sided,
            p_one_sided: test.p_one_sided,
            zero_variance: test.zero_variance,
            calib_auc,
            test_auc,
            delta_auc,
            pass: t_pass && gap_pass,
            grid_lo: lo,
            grid_hi: hi,
            grid_center: center,
            attempts: attempt,
            df: INNER_FOLDS - 1,
        };
        if record.pass {
            return Ok(record);
        }
        if !t_pass {
            let width = (hi - lo) * (1.0 - cfg.shrink);
            lo = (tau_bar - 0.5 * width).max(0.0);
            hi = (lo + width).min(1.0);
            lo = hi - width;
        } else {
            round += 1;
            split = stratified_split(labels, cfg, round)?;
            lo = cfg.grid_lo;
            hi = cfg.grid_hi;
        }
        last = Some(record);
    }
    Err(MotifError::NotConverged {
        attempts: cfg.max_attempts,
        last: Box::new(last.expect("at least one attempt ran")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_passes_without_t() {
        let (m, se) = inner_summary(&[0.4, 0.4, 0.4]).unwrap();
        assert_eq!((m, se), (0.4, 0.0));
        let s = stability_test(m, se, 0.5, 3).unwrap();
        assert!(s.zero_variance && s.t.is_none());
    }

    #[test]
    fn df2_closed_form() {
        for t in [0.1f64, 0.9, 1.6, 4.0] {
            let s = stability_test(0.5 + t * 0.01 / 3f64.sqrt(), 0.01, 0.5, 3).unwrap();
            let closed = 1.0 - t / (2.0 + t * t).sqrt();
            assert!((s.p_two_sided.unwrap() - closed).abs() < 1e-9);
        }
    }
}
