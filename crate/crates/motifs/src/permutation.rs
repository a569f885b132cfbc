use fastweight_core::seeds::stream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::background::{MarkovBackground, Sequence};
use crate::channels::Motif;
use crate::{MotifError, Result};

pub const PRODUCTION_PERMUTATION_FLOOR: usize = 50_000;
pub const DESK_PERMUTATION_FLOOR: usize = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub b_min: usize,
    pub b_max: usize,
    /// Draws added per block once the floor is reached.
    pub block: usize,
    /// Stop when consecutive block estimates differ by less than this.
    pub stability: f64,
    pub seed: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            b_min: DESK_PERMUTATION_FLOOR,
            b_max: PRODUCTION_PERMUTATION_FLOOR,
            block: 500,
            stability: 0.01,
            seed: 0,
        }
    }
}

impl PermutationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b_min == 0 || self.b_max < self.b_min || self.block == 0 {
            return Err(MotifError::InvalidConfig("need 1 <= b_min <= b_max and a positive block".into()));
        }
        if !(self.stability > 0.0) {
            return Err(MotifError::InvalidConfig("stability window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    pub b_used: usize,
    /// Null draws at least as large as the observed statistic.
    pub exceed: usize,
    /// Stopped by the stability rule rather than the `b_max` cap.
    pub stable: bool,
}

struct Counter {
    observed: f64,
    exceed: usize,
    used: usize,
    last_p: f64,
    done: bool,
    stable: bool,
}

impl Counter {
    fn p(&self) -> f64 {
        (1 + self.exceed) as f64 / (self.used + 1) as f64
    }

    fn absorb(&mut self, draws: &[f64]) {
        self.used += draws.len();
        self.exceed += draws.iter().filter(|&&v| v >= self.observed).count();
    }
}

/// Shared adaptive loop: `eval(replicate, active)` returns the null
/// statistics of replicate `replicate` for each index in `active`.
fn adaptive<F>(observed: &[f64], cfg: &PermutationConfig, eval: F) -> Result<Vec<PermutationResult>>
where
    F: Fn(u64, &[usize]) -> Vec<f64> + Sync,
{
    cfg.validate()?;
    if observed.iter().any(|v| !v.is_finite()) {
        return Err(MotifError::NonFinite("observed statistic".into()));
    }
    let mut counters: Vec<Counter> = observed
        .iter()
        .map(|&o| Counter {
            observed: o,
            exceed: 0,
            used: 0,
            last_p: f64::NAN,
            done: false,
            stable: false,
        })
        .collect();
    let mut next = 0u64;
    let mut size = cfg.b_min;
    loop {
        let active: Vec<usize> = (0..counters.len()).filter(|&i| !counters[i].done).collect();
        if active.is_empty() {
            break;
        }
        let block: Vec<Vec<f64>> = (next..next + size as u64)
            .into_par_iter()
            .map(|r| eval(r, &active))
            .collect();
        if block.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MotifError::NonFinite("null statistic".into()));
        }
        next += size as u64;
        for (slot, &i) in active.iter().enumerate() {
            let draws: Vec<f64> = block.iter().map(|row| row[slot]).collect();
            let c = &mut counters[i];
            c.absorb(&draws);
            let p = c.p();
            if c.last_p.is_finite() && (p - c.last_p).abs() < cfg.stability {
                c.done = true;
                c.stable = true;
            } else if c.used >= cfg.b_max {
                c.done = true;
            }
            c.last_p = p;
        }
        size = cfg.block;
        let room = counters.iter().filter(|c| !c.done).map(|c| cfg.b_max - c.used).min();
        if let Some(room) = room {
            size = size.min(room);
        }
    }
    Ok(counters
        .iter()
        .map(|c| PermutationResult {
            p_value: c.p(),
            b_used: c.used,
            exceed: c.exceed,
            stable: c.stable,
        })
        .collect())
}

/// Plus-one permutation p-value `(1 + #{null >= observed}) / (B + 1)`.
/// `null_stat(i)` must produce the `i`-th null replicate deterministically.
pub fn permutation_pvalue<F>(observed: f64, null_stat: F, cfg: &PermutationConfig) -> Result<PermutationResult>
where
    F: Fn(u64) -> f64 + Sync,
{
    Ok(adaptive(&[observed], cfg, |r, _| vec![null_stat(r)])?.remove(0))
}

/// Exact p-value over a fully enumerated null that includes the identity.
pub fn exhaustive_pvalue(observed: f64, null: &[f64]) -> Result<f64> {
    if null.is_empty() {
        return Err(MotifError::Empty("null enumeration".into()));
    }
    if !observed.is_finite() || null.iter().any(|v| !v.is_finite()) {
        return Err(MotifError::NonFinite("permutation statistic".into()));
    }
    Ok(null.iter().filter(|&&v| v >= observed).count() as f64 / null.len() as f64)
}

/// Tests every motif's activation on `observed` against background
/// repertoires with the same sequence lengths. Replicate `i` is one null
/// repertoire shared by all motifs still running.
pub fn test_motifs(
    observed: &[Sequence],
    motifs: &[Motif],
    background: &MarkovBackground,
    cfg: &PermutationConfig,
) -> Result<Vec<PermutationResult>> {
    if observed.is_empty() {
        return Err(MotifError::Empty("observed repertoire".into()));
    }
    if motifs.is_empty() {
        return Ok(Vec::new());
    }
    let lengths: Vec<usize> = observed.iter().map(Vec::len).collect();
    let obs: Vec<f64> = motifs.iter().map(|m| m.activation(observed)).collect();
    adaptive(&obs, cfg, |r, active| {
        let mut rng = stream(cfg.seed, "null-repertoire", r);
        let null = background.sample_like(&lengths, &mut rng);
        active.iter().map(|&i| motifs[i].activation(&null)).collect()
    })
}
