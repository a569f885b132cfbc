//! Small statistical toolkit shared by the spectral, prototype, motif and
//! pipeline stages: order statistics, ranks, bootstrap resampling and
//! percentile/BCa intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::seeds::rng_from;
use crate::{CoreError, Result};

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Variance with divisor `n`.
pub fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64
}

/// Standard deviation with divisor `n - 1`; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    out.sort_by(f64::total_cmp);
    out
}

/// Linear interpolation between order statistics (Hyndman-Fan type 7):
/// position `p * (n - 1)` in the sorted sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    quantile_sorted(&sorted(values), p)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// Area under the ROC curve from the Mann-Whitney rank sum; tied scores
/// count half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::DimensionMismatch {
            what: "auc labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    crate::ensure_finite("auc scores", scores.iter())?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::Undefined("AUC with a single class".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::DimensionMismatch {
            what: "pearson",
            expected: a.len(),
            got: b.len(),
        });
    }
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CoreError::Undefined(
            "correlation of a constant input".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::DimensionMismatch {
            what: "spearman",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 3 {
        return Err(CoreError::InvalidConfig(
            "spearman needs at least 3 pairs".into(),
        ));
    }
    crate::ensure_finite("spearman input", a.iter().chain(b))?;
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// How bootstrap resamples are produced.
///
/// `Random` draws `n_boot` resamples from a ChaCha8 stream seeded with `seed`;
/// within a replicate, indices are drawn one after another with
/// `rng.random_range(0..n_pop)`. `Exhaustive` enumerates every one of the
/// `n_pop^n_draw` ordered index sequences in lexicographic order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resampler {
    Random { n_boot: usize, seed: u64 },
    Exhaustive,
}

impl Resampler {
    pub fn random(n_boot: usize, seed: u64) -> Self {
        Resampler::Random { n_boot, seed }
    }
}

const MAX_ENUMERATION: usize = 20_000_000;

pub fn resample_indices(n_pop: usize, n_draw: usize, resampler: &Resampler) -> Result<Vec<Vec<usize>>> {
    if n_pop == 0 || n_draw == 0 {
        return Err(CoreError::Empty("bootstrap population".into()));
    }
    match *resampler {
        Resampler::Random { n_boot, seed } => {
            if n_boot == 0 {
                return Err(CoreError::InvalidConfig("n_boot must be positive".into()));
            }
            let mut rng = rng_from(seed);
            Ok((0..n_boot)
                .map(|_| (0..n_draw).map(|_| rng.random_range(0..n_pop)).collect())
                .collect())
        }
        Resampler::Exhaustive => {
            let total = (n_pop as f64).powi(n_draw as i32);
            if total > MAX_ENUMERATION as f64 {
                return Err(CoreError::InvalidConfig(format!(
                    "exhaustive enumeration of {n_pop}^{n_draw} resamples is too large"
                )));
            }
            let mut out = Vec::with_capacity(total as usize);
            let mut current = vec![0usize; n_draw];
            loop {
                out.push(current.clone());
                let mut pos = n_draw;
                loop {
                    if pos == 0 {
                        return Ok(out);
                    }
                    pos -= 1;
                    current[pos] += 1;
                    if current[pos] < n_pop {
                        break;
                    }
                    current[pos] = 0;
                }
            }
        }
    }
}

/// Evaluates `stat` on every resample of `0..n` (drawing `n` indices each).
pub fn bootstrap_replicates<F>(n: usize, resampler: &Resampler, stat: F) -> Result<Vec<f64>>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    let draws = resample_indices(n, n, resampler)?;
    Ok(draws.par_iter().map(|idx| stat(idx)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Central percentile interval at the given coverage (e.g. 0.9 -> 5th/95th).
pub fn percentile_interval(replicates: &[f64], level: f64) -> Result<Interval> {
    if replicates.is_empty() {
        return Err(CoreError::Empty("bootstrap replicates".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(CoreError::InvalidConfig("interval level must lie in (0, 1)".into()));
    }
    let s = sorted(replicates);
    let tail = (1.0 - level) / 2.0;
    Ok(Interval {
        lo: quantile_sorted(&s, tail),
        hi: quantile_sorted(&s, 1.0 - tail),
    })
}

/// Jackknife acceleration `sum(d^3) / (6 * sum(d^2)^1.5)` with
/// `d = mean(jack) - jack_i`; zero when the jackknife values are constant.
pub fn jackknife_acceleration(jackknife: &[f64]) -> f64 {
    let m = mean(jackknife);
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    for j in jackknife {
        let d = m - j;
        s2 += d * d;
        s3 += d * d * d;
    }
    if s2 <= 0.0 {
        0.0
    } else {
        s3 / (6.0 * s2.powf(1.5))
    }
}

/// Bias-corrected and accelerated interval.
///
/// The bias correction counts ties with the full-sample estimate as half,
/// and the proportion is clamped to `[1/(2B), 1 - 1/(2B)]` so the normal
/// quantile stays finite. A replicate set with no spread yields a zero-width
/// interval at that value.
pub fn bca_interval(replicates: &[f64], estimate: f64, jackknife: &[f64], level: f64) -> Result<Interval> {
    if replicates.is_empty() {
        return Err(CoreError::Empty("bootstrap replicates".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(CoreError::InvalidConfig("interval level must lie in (0, 1)".into()));
    }
    let s = sorted(replicates);
    let b = s.len() as f64;
    if s[0] == s[s.len() - 1] {
        return Ok(Interval::point(s[0]));
    }
    let below = s.iter().filter(|v| **v < estimate).count() as f64;
    let ties = s.iter().filter(|v| **v == estimate).count() as f64;
    let prop = ((below + 0.5 * ties) / b).clamp(0.5 / b, 1.0 - 0.5 / b);
    let z0 = normal_quantile(prop);
    let accel = jackknife_acceleration(jackknife);
    let adjust = |alpha: f64| {
        let z = normal_quantile(alpha);
        let denom = 1.0 - accel * (z0 + z);
        if denom <= 0.0 {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            normal_cdf(z0 + (z0 + z) / denom)
        }
    };
    let tail = (1.0 - level) / 2.0;
    let lo = quantile_sorted(&s, adjust(tail));
    let hi = quantile_sorted(&s, adjust(1.0 - tail));
    Ok(Interval {
        lo: lo.min(hi),
        hi: hi.max(lo),
    })
}

/// Leave-one-out values of a statistic over `0..n`.
pub fn jackknife_values<F>(n: usize, stat: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> f64,
{
    (0..n)
        .map(|skip| {
            let idx: Vec<usize> = (0..n).filter(|i| *i != skip).collect();
            stat(&idx)
        })
        .collect()
}
