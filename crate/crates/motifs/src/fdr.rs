use fastweight_core::seeds::derive_seed;
use fastweight_core::stats::{bootstrap_replicates, percentile_interval, Interval, Resampler};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{MotifError, Result};

pub const STOREY_LAMBDA: f64 = 0.5;
pub const PI0_CI_LEVEL: f64 = 0.90;

fn check_pvalues(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(MotifError::Empty("p-values".into()));
    }
    if p.iter().any(|v| !(v.is_finite() && *v > 0.0 && *v <= 1.0)) {
        return Err(MotifError::InvalidConfig("p-values must lie in (0, 1]".into()));
    }
    Ok(())
}

/// Unclipped `#{p > lambda} / ((1 - lambda) m)`.
pub fn storey_raw(p: &[f64], lambda: f64) -> Result<f64> {
    check_pvalues(p)?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(MotifError::InvalidConfig("Storey lambda must lie in (0, 1)".into()));
    }
    Ok(p.iter().filter(|&&v| v > lambda).count() as f64 / ((1.0 - lambda) * p.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pi0Estimate {
    pub pi0: f64,
    pub raw: f64,
    pub ci90: Interval,
    pub n_boot: usize,
}

/// Clipped estimate with a percentile bootstrap interval over the p-values.
pub fn storey_pi0(p: &[f64], lambda: f64, n_boot: usize, seed: u64) -> Result<Pi0Estimate> {
    let raw = storey_raw(p, lambda)?;
    let reps = bootstrap_replicates(p.len(), &Resampler::random(n_boot, seed), |idx| {
        let above = idx.iter().filter(|&&i| p[i] > lambda).count();
        (above as f64 / ((1.0 - lambda) * idx.len() as f64)).min(1.0)
    })?;
    Ok(Pi0Estimate {
        pi0: raw.min(1.0),
        raw,
        ci90: percentile_interval(&reps, PI0_CI_LEVEL)?,
        n_boot,
    })
}

/// `q_(i) = min_{j >= i} pi0 m p_(j) / j`, capped at one, returned in input
/// order.
pub fn q_values(p: &[f64], pi0: f64) -> Result<Vec<f64>> {
    check_pvalues(p)?;
    if !(0.0..=1.0).contains(&pi0) {
        return Err(MotifError::InvalidConfig("pi0 must lie in [0, 1]".into()));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; m];
    let mut running = f64::INFINITY;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(pi0 * m as f64 * p[i] / (rank + 1) as f64);
        q[i] = running.min(1.0);
    }
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub effect: f64,
    pub detection_rate: f64,
    pub detections: usize,
    pub planted: usize,
}

/// Monte-Carlo detection rate per effect size. `simulate(effect, seed)`
/// returns one family of `(p-value, is_planted)`; q-values use `pi0 = 1` and
/// a planted motif counts as detected when its q-value is at most `alpha`.
pub fn power_curve<F>(effects: &[f64], alpha: f64, n_reps: usize, seed: u64, simulate: F) -> Result<Vec<PowerPoint>>
where
    F: Fn(f64, u64) -> Result<Vec<(f64, bool)>> + Sync,
{
    if effects.is_empty() {
        return Err(MotifError::Empty("effect grid".into()));
    }
    if n_reps == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(MotifError::InvalidConfig("need n_reps >= 1 and alpha in (0, 1)".into()));
    }
    effects
        .iter()
        .enumerate()
        .map(|(e_idx, &effect)| {
            let effect_seed = derive_seed(seed, "power-effect", e_idx as u64);
            let outcomes = (0..n_reps)
                .into_par_iter()
                .map(|r| {
                    let family = simulate(effect, derive_seed(effect_seed, "power-rep", r as u64))?;
                    let p: Vec<f64> = family.iter().map(|(p, _)| *p).collect();
                    let q = q_values(&p, 1.0)?;
                    let planted = family.iter().filter(|(_, t)| *t).count();
                    let hits = family.iter().zip(&q).filter(|((_, t), q)| *t && **q <= alpha).count();
                    Ok((hits, planted))
                })
                .collect::<Result<Vec<_>>>()?;
            let detections: usize = outcomes.iter().map(|o| o.0).sum();
            let planted: usize = outcomes.iter().map(|o| o.1).sum();
            Ok(PowerPoint {
                effect,
                detection_rate: if planted > 0 { detections as f64 / planted as f64 } else { 0.0 },
                detections,
                planted,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storey_clipping_and_zero() {
        let high = vec![0.6, 0.7, 0.9, 1.0];
        assert_eq!(storey_raw(&high, 0.5).unwrap(), 2.0);
        assert_eq!(storey_pi0(&high, 0.5, 100, 1).unwrap().pi0, 1.0);
        let low = vec![0.01, 0.2, 0.5];
        assert_eq!(storey_pi0(&low, 0.5, 100, 1).unwrap().pi0, 0.0);
        assert!(storey_raw(&[], 0.5).is_err());
        assert!(storey_raw(&[0.0], 0.5).is_err());
    }

    #[test]
    fn single_p_value_q_equals_p() {
        assert_eq!(q_values(&[0.03], 1.0).unwrap(), vec![0.03]);
    }
}
