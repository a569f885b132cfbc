use fastweight_core::stats::{mean, sample_std};
use serde::Serialize;

use crate::config::{Ablation, RunConfig};
use crate::motif_study::{run_motif_study, MotifStudy};
use crate::phase1::run_phase1;
use crate::phase2::{train_at, TrainedRetrieval};
use crate::prepare::{prepare, Prepared};
use crate::runlog::RunLog;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalSummary {
    pub r: usize,
    pub k: usize,
    pub eps_upper: f64,
    pub auc_task_mean: f64,
    pub auc_pooled: f64,
    pub f1: f64,
    pub ece: f64,
    pub mean_l0_tilde: f64,
    pub best_epoch: usize,
}

/// Phase 1 plus the full-support retrieval fit on an already prepared corpus.
pub fn retrieval_summary(cfg: &RunConfig, prep: &Prepared) -> Result<(RetrievalSummary, TrainedRetrieval)> {
    let p1 = run_phase1(cfg, prep)?;
    let tr = train_at(cfg, prep, &p1, None)?;
    let m = &tr.test_metrics;
    let s = RetrievalSummary {
        r: p1.r,
        k: p1.memory.k(),
        eps_upper: p1.certificate.pct90.hi,
        auc_task_mean: m.auc_task_mean,
        auc_pooled: m.pooled.auc,
        f1: m.pooled.f1,
        ece: m.pooled.ece,
        mean_l0_tilde: tr.test_eval.mean_l0_tilde,
        best_epoch: tr.outcome.best_epoch,
    };
    Ok((s, tr))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub retrieval: RetrievalSummary,
    pub motif_fp_rate: f64,
    pub motif_planted_called: usize,
    pub tau_pass_rate: f64,
    pub tau_mean_test_auc: f64,
}

fn motif_columns(study: &MotifStudy) -> (f64, usize, f64, f64) {
    let pass = study.tau.iter().filter(|t| t.pass).count() as f64 / study.tau.len().max(1) as f64;
    let auc = mean(&study.tau.iter().map(|t| t.test_auc).collect::<Vec<_>>());
    (study.null.fp_rate, study.planted_called, pass, auc)
}

/// Runs the full configuration and each requested variant. Variants that
/// only change the motif study reuse the full retrieval result and vice
/// versa.
pub fn run_ablations(cfg: &RunConfig, variants: &[Ablation], log: &mut RunLog) -> Result<Vec<AblationRow>> {
    let prep = prepare(cfg)?;
    let (full_retrieval, _) = retrieval_summary(cfg, &prep)?;
    let full_motifs = run_motif_study(cfg, log)?;
    let mut rows = Vec::new();
    let mut list = vec![Ablation::Full];
    list.extend(variants.iter().copied().filter(|v| *v != Ablation::Full));
    for v in list {
        let vc = v.apply(cfg);
        let retrieval = if v.touches_retrieval() && v != Ablation::Full {
            retrieval_summary(&vc, &prep)?.0
        } else {
            full_retrieval.clone()
        };
        let motif = if v.touches_retrieval() {
            motif_columns(&full_motifs)
        } else {
            motif_columns(&run_motif_study(&vc, &mut RunLog::new())?)
        };
        log.record("ablate", "variant", &[("variant", &v.label()), ("auc", &retrieval.auc_task_mean)]);
        rows.push(AblationRow {
            variant: v.label(),
            retrieval,
            motif_fp_rate: motif.0,
            motif_planted_called: motif.1,
            tau_pass_rate: motif.2,
            tau_mean_test_auc: motif.3,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub retrieval: RetrievalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedStat {
    pub statistic: &'static str,
    pub auc: f64,
    pub f1: f64,
    pub ece: f64,
}

/// The whole pipeline under each configured seed.
pub fn seed_runs(cfg: &RunConfig) -> Result<Vec<SeedRow>> {
    cfg.seeds
        .iter()
        .map(|&s| {
            let c = cfg.with_seed(s);
            let prep = prepare(&c)?;
            Ok(SeedRow {
                seed: s,
                retrieval: retrieval_summary(&c, &prep)?.0,
            })
        })
        .collect()
}

/// Mean, sample standard deviation and range of AUC, F1 and ECE over seeds.
pub fn seed_stats(rows: &[SeedRow]) -> Vec<SeedStat> {
    let col = |f: fn(&RetrievalSummary) -> f64| rows.iter().map(|r| f(&r.retrieval)).collect::<Vec<_>>();
    let (a, f, e) = (col(|r| r.auc_task_mean), col(|r| r.f1), col(|r| r.ece));
    let std = |v: &[f64]| if v.len() > 1 { sample_std(v) } else { 0.0 };
    let range = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
    vec![
        SeedStat {
            statistic: "mean",
            auc: mean(&a),
            f1: mean(&f),
            ece: mean(&e),
        },
        SeedStat {
            statistic: "std",
            auc: std(&a),
            f1: std(&f),
            ece: std(&e),
        },
        SeedStat {
            statistic: "range",
            auc: range(&a),
            f1: range(&f),
            ece: range(&e),
        },
    ]
}
