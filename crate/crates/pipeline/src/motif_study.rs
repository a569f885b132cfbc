use fastweight_core::seeds::{derive_seed, stream};
use fastweight_core::stats::auc;
use fastweight_motifs::channels::activation_matrix;
use fastweight_motifs::fdr::{power_curve, PowerPoint};
use fastweight_motifs::permutation::PermutationConfig;
use fastweight_motifs::synthetic::{
    calibrate_channel, distinct_motifs, fitted_background, labelled_cohort, motif_test, power_family, true_source,
    MotifTestConfig, MotifTestReport,
};
use fastweight_motifs::tau::TauCalibration;
use fastweight_motifs::{MarkovBackground, MotifError};
use rand::Rng;
use serde::Serialize;

use crate::config::{MotifStudyConfig, RunConfig};
use crate::runlog::RunLog;
use crate::{stage, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NullCalibration {
    pub seed: u64,
    pub m: usize,
    pub pi0: f64,
    pub pi0_lo: f64,
    pub pi0_hi: f64,
    pub n_p_below_alpha: usize,
    /// Motifs called significant: `q <= alpha`, or Bonferroni `m p <= alpha`.
    pub n_called: usize,
    pub fp_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenedRow {
    pub motif: String,
    pub planted: bool,
    pub activation: f64,
    pub p_value: f64,
    pub q_value: f64,
    pub b_used: usize,
    pub called: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauRow {
    pub cohort: String,
    pub tau_bar: f64,
    pub se: f64,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub df: usize,
    pub calib_auc: f64,
    pub test_auc: f64,
    pub delta_auc: f64,
    pub attempts: usize,
    pub converged: bool,
    pub pass: bool,
}

impl TauRow {
    fn from_calibration(c: &TauCalibration, converged: bool) -> Self {
        Self {
            cohort: c.cohort.clone(),
            tau_bar: c.tau_bar,
            se: c.se,
            t_stat: c.t_stat,
            p_value: c.p_value,
            df: c.df,
            calib_auc: c.calib_auc,
            test_auc: c.test_auc,
            delta_auc: c.delta_auc,
            attempts: c.attempts,
            converged,
            pass: c.pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotifStudy {
    pub null: NullCalibration,
    pub screened: Vec<ScreenedRow>,
    pub planted_called: usize,
    pub power: Vec<PowerPoint>,
    pub tau: Vec<TauRow>,
}

fn called(report: &MotifTestReport, alpha: f64, bonferroni: bool) -> Vec<bool> {
    let m = report.p_values.len() as f64;
    if bonferroni {
        report.p_values.iter().map(|p| (p * m).min(1.0) <= alpha).collect()
    } else {
        report.q_values.iter().map(|q| *q <= alpha).collect()
    }
}

fn test_config(mc: &MotifStudyConfig, top_frac: f64, seed: u64) -> MotifTestConfig {
    MotifTestConfig {
        top_frac,
        permutation: mc.permutation.clone(),
        alpha: mc.q_alpha,
        seed,
        ..MotifTestConfig::default()
    }
}

/// The whole motif family tested on a pure source repertoire.
pub fn null_calibration(mc: &MotifStudyConfig, source: &MarkovBackground, background: &MarkovBackground, seed: u64) -> Result<NullCalibration> {
    let motifs = distinct_motifs(mc.n_motifs, mc.motif_len, mc.spec.n_symbols, seed)?;
    let observed = source.sample_repertoire(mc.spec.sequences_per_repertoire, &mut stream(seed, "observed", 0));
    let rep = motif_test(&observed, &motifs, background, &test_config(mc, 1.0, seed))?;
    let calls = called(&rep, mc.q_alpha, mc.bonferroni_only);
    let n_called = calls.iter().filter(|c| **c).count();
    Ok(NullCalibration {
        seed,
        m: rep.p_values.len(),
        pi0: rep.pi0.pi0,
        pi0_lo: rep.pi0.ci90.lo,
        pi0_hi: rep.pi0.ci90.hi,
        n_p_below_alpha: rep.p_values.iter().filter(|&&p| p <= mc.q_alpha).count(),
        n_called,
        fp_rate: n_called as f64 / rep.p_values.len() as f64,
    })
}

fn cohort_row(mc: &MotifStudyConfig, source: &MarkovBackground, motif: &fastweight_motifs::Motif, i: usize, seed: u64) -> Result<TauRow> {
    let name = format!("cohort-{}", i + 1);
    let half = mc.cohort_size / 2;
    let cseed = derive_seed(seed, "cohort", i as u64);
    let (reps, labels) = labelled_cohort(&mc.spec, source, motif, mc.cohort_effect, half, mc.cohort_size - half, cseed);
    if mc.fixed_tau {
        let scores: Vec<f64> = reps.iter().map(|r| if motif.activation(r) >= 0.5 { 1.0 } else { 0.0 }).collect();
        let a = auc(&scores, &labels)?;
        return Ok(TauRow {
            cohort: name,
            tau_bar: 0.5,
            se: 0.0,
            t_stat: None,
            p_value: None,
            df: 0,
            calib_auc: a,
            test_auc: a,
            delta_auc: 0.0,
            attempts: 0,
            converged: true,
            pass: true,
        });
    }
    let tau_cfg = fastweight_motifs::tau::TauConfig {
        seed: derive_seed(seed, "tau", i as u64),
        ..mc.tau.clone()
    };
    match calibrate_channel(&name, motif, &reps, &labels, &tau_cfg) {
        Ok(c) => Ok(TauRow::from_calibration(&c, true)),
        Err(MotifError::NotConverged { last, .. }) => Ok(TauRow::from_calibration(&last, false)),
        Err(e) => Err(e.into()),
    }
}

/// Null calibration, a planted-motif screen, the power curve and per-cohort
/// threshold calibration, all on synthetic repertoires.
pub fn run_motif_study(cfg: &RunConfig, log: &mut RunLog) -> Result<MotifStudy> {
    let mc = &cfg.motifs;
    let seed = cfg.seed();
    let source = stage("motifs", true_source(&mc.spec, seed))?;
    let background = stage("motifs", fitted_background(&source, mc.background_sequences, seed))?;
    let null = stage("motifs-null", null_calibration(mc, &source, &background, seed))?;
    log.record(
        "motifs",
        "null",
        &[("m", &null.m), ("pi0", &null.pi0), ("called", &null.n_called), ("fp_rate", &null.fp_rate)],
    );

    let family = stage("motifs", distinct_motifs(mc.n_motifs, mc.motif_len, mc.spec.n_symbols, derive_seed(seed, "planted-family", 0)))?;
    let n_planted = mc.n_planted.min(family.len());
    let mut rng = stream(seed, "planted-observed", 0);
    let mut observed = source.sample_repertoire(mc.spec.sequences_per_repertoire, &mut rng);
    for m in &family[..n_planted] {
        for s in observed.iter_mut() {
            if rng.random::<f64>() < mc.planted_effect {
                m.plant(s, &mut rng);
            }
        }
    }
    let report = stage("motifs-screen", motif_test(&observed, &family, &background, &test_config(mc, mc.top_frac, seed)))?;
    let calls = called(&report, mc.q_alpha, mc.bonferroni_only);
    let acts = activation_matrix(&family, &[observed]);
    let screened: Vec<ScreenedRow> = report
        .screened
        .iter()
        .enumerate()
        .map(|(j, &i)| ScreenedRow {
            motif: family[i].label(),
            planted: i < n_planted,
            activation: acts[i][0],
            p_value: report.p_values[j],
            q_value: report.q_values[j],
            b_used: report.b_used[j],
            called: calls[j],
        })
        .collect();
    let planted_called = screened.iter().filter(|r| r.planted && r.called).count();
    log.record("motifs", "screen", &[("screened", &screened.len()), ("planted_called", &planted_called)]);

    let perm = PermutationConfig {
        b_min: mc.power_permutations,
        b_max: mc.power_permutations,
        ..mc.permutation.clone()
    };
    let planted_motif = family[0].clone();
    let power = stage(
        "motifs-power",
        power_curve(&mc.power_effects, mc.q_alpha, mc.power_reps, derive_seed(seed, "power", 0), |effect, s| {
            power_family(&mc.spec, &source, &planted_motif, &[], effect, &perm, s)
        }),
    )?;

    let tau = (0..mc.n_cohorts)
        .map(|i| cohort_row(mc, &source, &family[i % family.len()], i, seed))
        .collect::<Result<Vec<_>>>();
    let tau = stage("motifs-tau", tau)?;
    for t in &tau {
        log.record("motifs", "tau", &[("cohort", &t.cohort), ("tau_bar", &t.tau_bar), ("pass", &t.pass)]);
    }
    Ok(MotifStudy {
        null,
        screened,
        planted_called,
        power,
        tau,
    })
}
