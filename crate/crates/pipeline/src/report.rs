use std::fmt::Display;
use std::path::{Path, PathBuf};

use fastweight_core::riskbound::{BoundReport, BoundSummary};
use fastweight_core::synthdata::Partition;

use crate::ablate::{seed_stats, AblationRow, SeedRow};
use crate::baselines::BaselineResult;
use crate::config::RunConfig;
use crate::metrics::{MetricsRecord, SplitMetrics};
use crate::motif_study::MotifStudy;
use crate::phase1::Phase1Artifacts;
use crate::phase2::{FewShotRow, Phase2Artifacts};
use crate::prepare::Prepared;
use crate::runlog::RunLog;
use crate::{PipelineError, Result};

/// CSV table with string cells; numbers use Rust's shortest round-trip
/// formatting so identical values always print identically.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn c<T: Display>(v: T) -> String {
    v.to_string()
}

pub fn opt<T: Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.headers.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }
}

/// Single writer for a report directory.
pub struct ReportWriter {
    dir: PathBuf,
    written: Vec<String>,
}

impl ReportWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io(dir.display().to_string(), e.to_string()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).map_err(|e| PipelineError::Io(path.display().to_string(), e.to_string()))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        self.text(name, &t.to_csv())
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }
}

/// Wall-clock and memory measurements. Kept out of every other table so
/// that reruns can be compared byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeRow {
    pub stage: String,
    pub seconds: f64,
    pub ms_per_task: Option<f64>,
    pub peak_bytes: Option<usize>,
}

#[derive(Debug, Default)]
pub struct RunArtifacts {
    pub prepared: Option<Prepared>,
    pub phase1: Option<Phase1Artifacts>,
    pub phase2: Option<Phase2Artifacts>,
    pub few_shot: Option<Vec<FewShotRow>>,
    pub baselines: Option<Vec<BaselineResult>>,
    pub seeds: Option<Vec<SeedRow>>,
    pub ablations: Option<Vec<AblationRow>>,
    pub motifs: Option<MotifStudy>,
    pub riskbound: Option<(Vec<BoundReport>, BoundSummary)>,
    pub runtime: Vec<RuntimeRow>,
    pub log: RunLog,
}

const METRIC_HEADERS: [&str; 17] = [
    "split", "method", "n", "tp", "fp", "tn", "fn", "accuracy", "sensitivity", "specificity", "f1", "auc_pooled", "auc_task_mean", "ece",
    "health_mean", "health_std", "high_risk",
];

fn metric_row(split: &str, method: &str, m: &SplitMetrics) -> Vec<String> {
    let p: &MetricsRecord = &m.pooled;
    vec![
        c(split),
        c(method),
        c(p.n),
        c(p.confusion.tp),
        c(p.confusion.fp),
        c(p.confusion.tn),
        c(p.confusion.fn_),
        c(p.accuracy),
        c(p.sensitivity),
        c(p.specificity),
        c(p.f1),
        c(p.auc),
        c(m.auc_task_mean),
        c(p.ece),
        c(p.health_mean),
        c(p.health_std),
        c(p.high_risk),
    ]
}

fn corpus_tables(w: &mut ReportWriter, prep: &Prepared) -> Result<()> {
    let mut t = Table::new(&["task_id", "family", "partition", "seed_cluster", "n_support", "n_query", "theta_norm"]);
    for (i, task) in prep.corpus.tasks.iter().enumerate() {
        t.push(vec![
            c(&task.task_id),
            c(task.family),
            c(task.partition().map_or("none", Partition::as_str)),
            opt(prep.assignment.seed_cluster[i]),
            c(task.support.len()),
            c(task.query.len()),
            opt(task.theta_true.as_ref().map(|v| v.norm())),
        ]);
    }
    w.table("tasks.csv", &t)
}

fn phase1_tables(w: &mut ReportWriter, p1: &Phase1Artifacts) -> Result<()> {
    let mut t = Table::new(&["rho", "r"]);
    for (rho, r) in &p1.rank_by_rho {
        t.push(vec![c(rho), c(r)]);
    }
    w.table("rank_by_rho.csv", &t)?;

    let mut t = Table::new(&["index", "singular_value", "cumulative_energy"]);
    for (i, (s, e)) in p1.pca.singular_values.iter().zip(p1.pca.cumulative_energy()).enumerate() {
        t.push(vec![c(i + 1), c(s), c(e)]);
    }
    w.table("spectrum.csv", &t)?;

    let mut t = Table::new(&["r_cand", "zeta_emp", "p_raw", "p_adj", "reject", "selected"]);
    for rec in &p1.dim_test.records {
        t.push(vec![
            c(rec.r_cand),
            c(rec.zeta_emp),
            c(rec.p_raw),
            c(rec.p_adj),
            c(rec.reject),
            c(p1.dim_test.selected_r == Some(rec.r_cand)),
        ]);
    }
    w.table("dim_test.csv", &t)?;

    if let Some(seq) = &p1.sequential {
        let mut t = Table::new(&["r", "mean_improvement", "t_obs", "p_value", "significant", "selected"]);
        for s in &seq.steps {
            t.push(vec![c(s.r), c(s.mean_improvement), c(s.t_obs), c(s.p_value), c(s.significant), c(s.r == seq.selected_r)]);
        }
        w.table("sequential_r.csv", &t)?;
    }

    let mut t = Table::new(&["k", "k_after_merge", "mu", "kappa", "eps_hat", "eps_upper", "cluster_stability", "selected"]);
    for k in &p1.k_candidates {
        t.push(vec![
            c(k.k),
            c(k.k_after_merge),
            c(k.mu),
            c(k.kappa),
            c(k.eps_hat),
            c(k.eps_upper),
            c(k.cluster_stability),
            c(k.selected),
        ]);
    }
    w.table("k_grid.csv", &t)?;

    let mut t = Table::new(&["kept", "removed", "coherence", "k_after", "mu_after", "kappa_after", "coverage_before", "coverage_after"]);
    for e in p1.memory.merge_log() {
        t.push(vec![
            c(e.kept),
            c(e.removed),
            c(e.coherence),
            c(e.k_after),
            c(e.mu_after),
            c(e.kappa_after),
            opt(e.coverage_before),
            opt(e.coverage_after),
        ]);
    }
    w.table("merge_log.csv", &t)?;

    let cert = &p1.certificate;
    let mut t = Table::new(&[
        "r", "r_source", "k", "kappa", "mu", "eps_hat", "pct90_lo", "pct90_hi", "bca90_lo", "bca90_hi", "n_boot", "jl_mean", "jl_upper", "jl_accepted",
    ]);
    t.push(vec![
        c(p1.r),
        c(p1.r_source.as_str()),
        c(p1.memory.k()),
        c(p1.memory.kappa()),
        c(p1.memory.mu()),
        c(cert.eps_hat),
        c(cert.pct90.lo),
        c(cert.pct90.hi),
        c(cert.bca90.lo),
        c(cert.bca90.hi),
        c(cert.n_boot),
        opt(p1.jl.as_ref().map(|j| j.mean_fraction)),
        opt(p1.jl.as_ref().map(|j| j.upper_bound)),
        opt(p1.jl.as_ref().map(|j| j.accepted)),
    ]);
    w.table("memory.csv", &t)?;

    let mut t = Table::new(&["prototype"].iter().copied().chain((0..p1.memory.d()).map(|_| "")).collect::<Vec<_>>());
    t.headers = std::iter::once("prototype".to_string()).chain((0..p1.memory.d()).map(|j| format!("theta_{j}"))).collect();
    for k in 0..p1.memory.k() {
        let row = p1.memory.row(k);
        t.push(std::iter::once(c(k)).chain(row.iter().map(c)).collect());
    }
    w.table("prototypes.csv", &t)
}

fn phase2_tables(w: &mut ReportWriter, p2: &Phase2Artifacts, runtime: &mut Vec<RuntimeRow>) -> Result<()> {
    let main = &p2.main;
    let mut t = Table::new(&["epoch", "train_loss", "val_loss", "val_auc", "active_jaccard", "mean_l0", "mean_l0_tilde"]);
    for h in &main.outcome.history {
        t.push(vec![
            c(h.epoch),
            c(h.train_loss),
            c(h.val_loss),
            c(h.val_auc),
            c(h.active_jaccard),
            c(h.mean_l0),
            c(h.mean_l0_tilde),
        ]);
    }
    w.table("training_curve.csv", &t)?;

    let mut t = Table::new(&[
        "epoch", "train_loss", "val_loss", "val_auc", "active_jaccard", "mean_l0", "mean_l0_tilde", "kappa", "mu", "eps_hat", "eps_lo", "eps_hi", "sv1",
        "sv2", "fisher_eig1", "fisher_eig2",
    ]);
    for d in &p2.diagnostics {
        t.push(vec![
            c(d.epoch),
            c(d.train_loss),
            c(d.val_loss),
            c(d.val_auc),
            c(d.active_jaccard),
            c(d.mean_l0),
            c(d.mean_l0_tilde),
            c(d.kappa),
            c(d.mu),
            c(d.eps_hat),
            c(d.eps_lo),
            c(d.eps_hi),
            c(d.sv1),
            c(d.sv2),
            c(d.fisher_eig1),
            c(d.fisher_eig2),
        ]);
    }
    w.table("diagnostics.csv", &t)?;

    let mut t = Table::new(&["lambda", "eta", "val_auc", "mean_l0", "mean_l0_tilde"]);
    for s in &p2.sweep {
        t.push(vec![c(s.lambda), c(s.eta), c(s.val_auc), c(s.mean_l0), c(s.mean_l0_tilde)]);
    }
    w.table("sweep_lambda_eta.csv", &t)?;

    let mut t = Table::new(&["gamma", "top_r", "val_auc", "mean_l0_tilde", "selected"]);
    for g in &main.selection {
        t.push(vec![c(g.gamma), c(g.top_r), c(g.val_auc), c(g.mean_l0_tilde), c(g.selected)]);
    }
    w.table("selection.csv", &t)?;

    let mut t = Table::new(&["task_id", "auc", "l0", "l0_tilde", "recon_before", "recon_after", "iterations", "kkt_residual"]);
    for ((task, a), p) in main.test.iter().zip(&main.test_metrics.per_task_auc).zip(&main.test_eval.predictions) {
        let s = &p.solution;
        t.push(vec![
            c(&task.task_id),
            c(a),
            c(fastweight_core::retrieval::l0_norm(&s.w)),
            c(fastweight_core::retrieval::l0_norm(&s.w_tilde)),
            c(s.recon_before),
            c(s.recon_after),
            c(s.iterations),
            c(s.kkt_residual),
        ]);
    }
    w.table("test_tasks.csv", &t)?;

    let mut t = Table::new(&["bin_lo", "bin_hi", "count", "mean_prob", "frac_pos"]);
    for b in &main.test_metrics.pooled.bins {
        t.push(vec![c(b.lo), c(b.hi), c(b.count), c(b.mean_prob), c(b.frac_pos)]);
    }
    w.table("calibration_bins.csv", &t)?;

    let n = p2.latency_ms.len().max(1) as f64;
    runtime.push(RuntimeRow {
        stage: "retrieval-solve-compose".into(),
        seconds: p2.latency_ms.iter().sum::<f64>() / 1e3,
        ms_per_task: Some(p2.latency_ms.iter().sum::<f64>() / n),
        peak_bytes: None,
    });
    Ok(())
}

/// Writes every artifact present in `run` plus the config, run log and a
/// plain-text summary. Missing stages are skipped, so a bundle emitted before
/// phase 2 holds the phase-1 tables only.
pub fn emit_report(cfg: &RunConfig, run: &RunArtifacts, dir: &Path) -> Result<Vec<String>> {
    let mut w = ReportWriter::create(dir)?;
    let hash = cfg.hash();
    w.text("config.json", &cfg.to_json())?;
    let mut summary = vec![format!("config_hash {hash}"), format!("seed {}", cfg.seed())];
    let mut runtime = run.runtime.clone();

    if let Some(prep) = &run.prepared {
        corpus_tables(&mut w, prep)?;
        summary.push(format!("tasks {}", prep.corpus.tasks.len()));
        for p in [Partition::PreSeed, Partition::PreRest, Partition::RetTrain, Partition::RetVal, Partition::RetTest] {
            summary.push(format!("partition {} {}", p.as_str(), prep.assignment.count(p)));
        }
    }
    if let Some(p1) = &run.phase1 {
        phase1_tables(&mut w, p1)?;
        summary.push(format!("r_pca {} r {} ({})", p1.r_pca, p1.r, p1.r_source.as_str()));
        summary.push(format!("prototypes {} eps_hat {} eps_upper {}", p1.memory.k(), p1.certificate.eps_hat, p1.certificate.pct90.hi));
        for f in &p1.dim_test.flags {
            summary.push(format!("dim_test_flag {f}"));
        }
    }
    let mut metrics = Table::new(&METRIC_HEADERS);
    if let Some(p2) = &run.phase2 {
        phase2_tables(&mut w, p2, &mut runtime)?;
        metrics.push(metric_row("val", "retrieval", &p2.main.val_metrics));
        metrics.push(metric_row("test", "retrieval", &p2.main.test_metrics));
        summary.push(format!(
            "retrieval test auc_task_mean {} auc_pooled {} f1 {} ece {}",
            p2.main.test_metrics.auc_task_mean, p2.main.test_metrics.pooled.auc, p2.main.test_metrics.pooled.f1, p2.main.test_metrics.pooled.ece
        ));
    }
    if let Some(bs) = &run.baselines {
        for b in bs {
            metrics.push(metric_row("test", b.method, &b.metrics));
            runtime.push(RuntimeRow {
                stage: format!("baseline-{}", b.method),
                seconds: b.ms_per_task * b.metrics.per_task_auc.len() as f64 / 1e3,
                ms_per_task: Some(b.ms_per_task),
                peak_bytes: b.peak_bytes,
            });
            summary.push(format!("baseline {} auc_task_mean {}", b.method, b.metrics.auc_task_mean));
        }
    }
    if !metrics.rows.is_empty() {
        w.table("metrics.csv", &metrics)?;
    }
    if let Some(fs) = &run.few_shot {
        let mut t = Table::new(&[
            "support_size", "auc_task_mean", "auc_pooled", "accuracy", "f1", "ece", "support_ridge_auc", "oracle_auc", "ratio_to_oracle", "epochs",
        ]);
        for r in fs {
            t.push(vec![
                c(r.support_size),
                c(r.auc_task_mean),
                c(r.auc_pooled),
                c(r.accuracy),
                c(r.f1),
                c(r.ece),
                c(r.support_ridge_auc),
                c(r.oracle_auc),
                c(r.ratio_to_oracle),
                c(r.epochs),
            ]);
            summary.push(format!("few_shot {} auc {} ratio {}", r.support_size, r.auc_task_mean, r.ratio_to_oracle));
        }
        w.table("few_shot.csv", &t)?;
    }
    if let Some(seeds) = &run.seeds {
        let mut t = Table::new(&["seed", "r", "k", "auc_task_mean", "auc_pooled", "f1", "ece", "mean_l0_tilde"]);
        for s in seeds {
            let r = &s.retrieval;
            t.push(vec![c(s.seed), c(r.r), c(r.k), c(r.auc_task_mean), c(r.auc_pooled), c(r.f1), c(r.ece), c(r.mean_l0_tilde)]);
        }
        w.table("seed_runs.csv", &t)?;
        let mut t = Table::new(&["statistic", "auc", "f1", "ece"]);
        for s in seed_stats(seeds) {
            t.push(vec![c(s.statistic), c(s.auc), c(s.f1), c(s.ece)]);
            summary.push(format!("seed_{} auc {} f1 {} ece {}", s.statistic, s.auc, s.f1, s.ece));
        }
        w.table("seed_stability.csv", &t)?;
    }
    if let Some(rows) = &run.ablations {
        let mut t = Table::new(&[
            "variant", "r", "k", "eps_upper", "auc_task_mean", "auc_pooled", "f1", "ece", "mean_l0_tilde", "motif_fp_rate", "motif_planted_called",
            "tau_pass_rate", "tau_mean_test_auc",
        ]);
        for a in rows {
            let r = &a.retrieval;
            t.push(vec![
                c(a.variant),
                c(r.r),
                c(r.k),
                c(r.eps_upper),
                c(r.auc_task_mean),
                c(r.auc_pooled),
                c(r.f1),
                c(r.ece),
                c(r.mean_l0_tilde),
                c(a.motif_fp_rate),
                c(a.motif_planted_called),
                c(a.tau_pass_rate),
                c(a.tau_mean_test_auc),
            ]);
        }
        w.table("ablation.csv", &t)?;
    }
    if let Some(m) = &run.motifs {
        motif_tables(&mut w, m)?;
        summary.push(format!("motif_null pi0 {} fp_rate {}", m.null.pi0, m.null.fp_rate));
    }
    if let Some((reports, s)) = &run.riskbound {
        let mut t = Table::new(&[
            "task_id", "eps_app", "eps_task", "approx_error", "lipschitz", "emp_gap", "task_bound", "deterministic_bound", "triangle_holds",
            "task_bound_holds", "satisfied", "gen_gap_memory", "gen_gap_oracle",
        ]);
        for r in reports {
            t.push(vec![
                c(&r.task_id),
                c(r.eps_app),
                c(r.eps_task),
                c(r.approx_error),
                c(r.lipschitz),
                c(r.emp_gap),
                c(r.task_bound),
                c(r.deterministic_bound),
                c(r.triangle_holds),
                c(r.task_bound_holds),
                c(r.satisfied),
                opt(r.gen_gap_memory),
                opt(r.gen_gap_oracle),
            ]);
        }
        w.table("riskbound.csv", &t)?;
        summary.push(format!(
            "riskbound tasks {} triangle_rate {} task_bound_rate {} certified_rate {}",
            s.n_tasks, s.triangle_rate, s.task_bound_rate, s.certified_rate
        ));
    }
    if !runtime.is_empty() {
        let mut t = Table::new(&["stage", "seconds", "ms_per_task", "peak_bytes_approx"]);
        for r in &runtime {
            t.push(vec![c(&r.stage), c(r.seconds), opt(r.ms_per_task), opt(r.peak_bytes)]);
        }
        w.table("runtime.csv", &t)?;
    }
    w.text("run.log", &run.log.render())?;
    summary.push(String::new());
    w.text("summary.txt", &summary.join("\n"))?;
    Ok(w.written().to_vec())
}

fn motif_tables(w: &mut ReportWriter, m: &MotifStudy) -> Result<()> {
    let n = &m.null;
    let mut t = Table::new(&["seed", "m", "pi0", "pi0_lo", "pi0_hi", "n_p_below_alpha", "n_called", "fp_rate"]);
    t.push(vec![c(n.seed), c(n.m), c(n.pi0), c(n.pi0_lo), c(n.pi0_hi), c(n.n_p_below_alpha), c(n.n_called), c(n.fp_rate)]);
    w.table("motif_null.csv", &t)?;

    let mut t = Table::new(&["motif", "planted", "activation", "p_value", "q_value", "b_used", "called"]);
    for r in &m.screened {
        t.push(vec![c(&r.motif), c(r.planted), c(r.activation), c(r.p_value), c(r.q_value), c(r.b_used), c(r.called)]);
    }
    w.table("motif_screen.csv", &t)?;

    let mut t = Table::new(&["effect", "detection_rate", "detections", "planted"]);
    for p in &m.power {
        t.push(vec![c(p.effect), c(p.detection_rate), c(p.detections), c(p.planted)]);
    }
    w.table("motif_power.csv", &t)?;

    let mut t = Table::new(&[
        "cohort", "tau_bar", "se", "t", "p_value", "df", "calib_auc", "test_auc", "delta_auc", "attempts", "converged", "pass",
    ]);
    for r in &m.tau {
        t.push(vec![
            c(&r.cohort),
            c(r.tau_bar),
            c(r.se),
            opt(r.t_stat),
            opt(r.p_value),
            c(r.df),
            c(r.calib_auc),
            c(r.test_auc),
            c(r.delta_auc),
            c(r.attempts),
            c(r.converged),
            c(r.pass),
        ]);
    }
    w.table("tau_calibration.csv", &t)
}
