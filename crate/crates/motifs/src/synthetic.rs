use std::collections::BTreeSet;

use fastweight_core::seeds::{derive_seed, rng_from, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::background::{MarkovBackground, Sequence, DEFAULT_ORDER, DEFAULT_PSEUDOCOUNT};
use crate::channels::{activation_matrix, screen_channels, Motif, DEFAULT_TOP_FRAC};
use crate::fdr::{q_values, storey_pi0, Pi0Estimate, PowerPoint, STOREY_LAMBDA};
use crate::permutation::{test_motifs, PermutationConfig};
use crate::tau::{calibrate_tau, TauCalibration, TauConfig};
use crate::{MotifError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_symbols: usize,
    pub order: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub sequences_per_repertoire: usize,
    /// Dirichlet concentration of the true source's transition rows.
    pub concentration: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_symbols: 8,
            order: DEFAULT_ORDER,
            min_len: 10,
            max_len: 16,
            sequences_per_repertoire: 40,
            concentration: 2.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_symbols < 2 || self.n_symbols > 256 {
            return Err(MotifError::InvalidConfig("alphabet size must lie in 2..=256".into()));
        }
        if self.min_len == 0 || self.max_len < self.min_len || self.sequences_per_repertoire == 0 {
            return Err(MotifError::InvalidConfig("need 1 <= min_len <= max_len and nonempty repertoires".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(MotifError::InvalidConfig("concentration must be positive".into()));
        }
        Ok(())
    }

    /// Uniform length distribution over `min_len..=max_len`.
    pub fn length_profile(&self) -> Vec<(usize, usize)> {
        (self.min_len..=self.max_len).map(|l| (l, 1)).collect()
    }
}

/// The generating source shared by every repertoire drawn from `seed`.
pub fn true_source(spec: &SyntheticSpec, seed: u64) -> Result<MarkovBackground> {
    spec.validate()?;
    let mut rng = stream(seed, "motif-source", 0);
    MarkovBackground::random(spec.n_symbols, spec.order, &spec.length_profile(), spec.concentration, &mut rng)
}

/// Background fitted on `n_sequences` fresh draws from the source.
pub fn fitted_background(source: &MarkovBackground, n_sequences: usize, seed: u64) -> Result<MarkovBackground> {
    let mut rng = stream(seed, "background-corpus", 0);
    let corpus = source.sample_repertoire(n_sequences, &mut rng);
    MarkovBackground::fit(&corpus, source.n_symbols(), source.order(), DEFAULT_PSEUDOCOUNT)
}

/// `n` distinct k-mers drawn uniformly without replacement.
pub fn distinct_motifs(n: usize, k: usize, n_symbols: usize, seed: u64) -> Result<Vec<Motif>> {
    if k == 0 || n_symbols == 0 || n_symbols > 256 {
        return Err(MotifError::InvalidConfig("need k >= 1 and an alphabet of 1..=256 symbols".into()));
    }
    let space = (n_symbols as f64).powi(k as i32);
    if n as f64 > space {
        return Err(MotifError::InvalidConfig(format!("only {space} distinct {k}-mers exist")));
    }
    let mut rng = rng_from(derive_seed(seed, "motif-family", k as u64));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let symbols: Vec<u8> = (0..k).map(|_| rng.random_range(0..n_symbols) as u8).collect();
        if seen.insert(symbols.clone()) {
            out.push(Motif::new(symbols));
        }
    }
    Ok(out)
}

/// Source repertoire in which each sequence carries `motif` with
/// probability `effect`.
pub fn planted_repertoire<R: Rng + ?Sized>(
    source: &MarkovBackground,
    n_sequences: usize,
    motif: &Motif,
    effect: f64,
    rng: &mut R,
) -> Vec<Sequence> {
    let mut rep = source.sample_repertoire(n_sequences, rng);
    for seq in &mut rep {
        if rng.random::<f64>() < effect {
            motif.plant(seq, rng);
        }
    }
    rep
}

/// Labelled repertoires: cases carry the motif at rate `effect`, controls are
/// pure source draws. Labels are 1 for cases.
pub fn labelled_cohort(
    spec: &SyntheticSpec,
    source: &MarkovBackground,
    motif: &Motif,
    effect: f64,
    n_cases: usize,
    n_controls: usize,
    seed: u64,
) -> (Vec<Vec<Sequence>>, Vec<u8>) {
    let mut reps = Vec::with_capacity(n_cases + n_controls);
    let mut labels = Vec::with_capacity(n_cases + n_controls);
    for i in 0..n_cases + n_controls {
        let case = i < n_cases;
        let mut rng = stream(seed, "cohort-repertoire", i as u64);
        let e = if case { effect } else { 0.0 };
        reps.push(planted_repertoire(source, spec.sequences_per_repertoire, motif, e, &mut rng));
        labels.push(case as u8);
    }
    (reps, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifTestConfig {
    pub top_frac: f64,
    pub permutation: PermutationConfig,
    pub lambda: f64,
    pub n_boot: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for MotifTestConfig {
    fn default() -> Self {
        Self {
            top_frac: DEFAULT_TOP_FRAC,
            permutation: PermutationConfig::default(),
            lambda: STOREY_LAMBDA,
            n_boot: 1000,
            alpha: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifTestReport {
    pub screened: Vec<usize>,
    /// Entries follow `screened`.
    pub p_values: Vec<f64>,
    pub q_values: Vec<f64>,
    pub b_used: Vec<usize>,
    pub pi0: Pi0Estimate,
    /// Channel indices with `q <= alpha`.
    pub discoveries: Vec<usize>,
    pub power_curve: Vec<PowerPoint>,
    pub tau: Vec<TauCalibration>,
}

/// Screens `motifs` on the observed repertoire, tests the screened set
/// against the background and controls it with Storey q-values over the
/// screened family.
pub fn motif_test(
    observed: &[Sequence],
    motifs: &[Motif],
    background: &MarkovBackground,
    cfg: &MotifTestConfig,
) -> Result<MotifTestReport> {
    if motifs.is_empty() {
        return Err(MotifError::Empty("motif family".into()));
    }
    let acts = activation_matrix(motifs, &[observed.to_vec()]);
    let screened = screen_channels(&acts, cfg.top_frac)?;
    let family: Vec<Motif> = screened.iter().map(|&i| motifs[i].clone()).collect();
    let perm = PermutationConfig {
        seed: derive_seed(cfg.seed, "motif-permutation", 0),
        ..cfg.permutation.clone()
    };
    let results = test_motifs(observed, &family, background, &perm)?;
    let p_values: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    let pi0 = storey_pi0(&p_values, cfg.lambda, cfg.n_boot, derive_seed(cfg.seed, "pi0-boot", 0))?;
    let q = q_values(&p_values, pi0.pi0)?;
    let discoveries = screened.iter().zip(&q).filter(|(_, q)| **q <= cfg.alpha).map(|(i, _)| *i).collect();
    Ok(MotifTestReport {
        screened,
        p_values,
        q_values: q,
        b_used: results.iter().map(|r| r.b_used).collect(),
        pi0,
        discoveries,
        power_curve: Vec::new(),
        tau: Vec::new(),
    })
}

/// One power-simulation family: the planted motif (first entry) plus
/// `n_null` further motifs, all tested on a repertoire planted at `effect`.
pub fn power_family(
    spec: &SyntheticSpec,
    source: &MarkovBackground,
    planted: &Motif,
    nulls: &[Motif],
    effect: f64,
    permutation: &PermutationConfig,
    seed: u64,
) -> Result<Vec<(f64, bool)>> {
    let mut rng = stream(seed, "power-repertoire", 0);
    let observed = planted_repertoire(source, spec.sequences_per_repertoire, planted, effect, &mut rng);
    let mut family = vec![planted.clone()];
    family.extend(nulls.iter().cloned());
    let perm = PermutationConfig {
        seed: derive_seed(seed, "power-permutation", 0),
        ..permutation.clone()
    };
    let results = test_motifs(&observed, &family, source, &perm)?;
    Ok(results.iter().enumerate().map(|(i, r)| (r.p_value, i == 0)).collect())
}

/// Threshold calibration of one channel on a labelled cohort.
pub fn calibrate_channel(
    cohort: &str,
    motif: &Motif,
    repertoires: &[Vec<Sequence>],
    labels: &[u8],
    cfg: &TauConfig,
) -> Result<TauCalibration> {
    let scores: Vec<f64> = repertoires.iter().map(|r| motif.activation(r)).collect();
    calibrate_tau(cohort, &scores, labels, cfg)
}
