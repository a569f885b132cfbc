use std::time::Instant;

use fastweight_core::adapters::{ridge_adapter, ridge_on_samples};
use fastweight_core::descriptors::build_descriptor;
use fastweight_core::retrieval::{
    evaluate, evaluate_cell, retrieve, sweep_lambda_eta, DescriptorTransform, EpochLog, Evaluation, RetrievalModel, RetrievalNet,
    RetrievalOperator, RetrievalTask, SweepCell, TrainOutcome,
};
use fastweight_core::seeds::derive_seed;
use fastweight_core::stats::auc;
use fastweight_core::synthdata::{sigmoid, Partition};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::metrics::{split_metrics, SplitMetrics, DEFAULT_ECE_BINS};
use crate::phase1::Phase1Artifacts;
use crate::prepare::Prepared;
use crate::runlog::RunLog;
use crate::{stage, PipelineError, Result};

/// Retrieval inputs for every task of `partition`, optionally with the
/// support cut to its first `support_size` samples. Only retrieval
/// partitions are accepted.
pub fn retrieval_tasks(
    cfg: &RunConfig,
    prep: &Prepared,
    p1: &Phase1Artifacts,
    partition: Partition,
    support_size: Option<usize>,
) -> Result<Vec<RetrievalTask>> {
    if partition.is_pretraining() {
        return Err(fastweight_core::CoreError::Leakage(format!(
            "retrieval tasks requested from pretraining partition {}",
            partition.as_str()
        ))
        .into());
    }
    let fmap = &prep.corpus.feature_map;
    prep.tasks_in(&[partition])
        .par_iter()
        .map(|t| {
            let task = match support_size {
                Some(n) => t.with_support_size(n)?,
                None => (*t).clone(),
            };
            let desc = build_descriptor(&task, &p1.probe, fmap, p1.basis(), &p1.standardizer, &cfg.phase2.descriptor)?;
            Ok(RetrievalTask {
                task_id: task.task_id.clone(),
                partition,
                descriptor: desc.to_vector(),
                theta_hat: ridge_adapter(&task, fmap, cfg.phase1.ridge_alpha)?,
                query_features: task.query.iter().map(|s| fmap.apply(&s.x)).collect(),
                query_labels: task.query.iter().map(|s| s.y).collect(),
            })
        })
        .collect::<fastweight_core::Result<Vec<_>>>()
        .map_err(Into::into)
}

pub fn initial_model(cfg: &RunConfig, d_z: usize, k: usize) -> RetrievalModel {
    let p2 = &cfg.phase2;
    let seed = cfg.seed();
    RetrievalModel {
        net: RetrievalNet::new(d_z, p2.hidden, k, derive_seed(seed, "net-init", 0)),
        transform: DescriptorTransform::build(&p2.transform, d_z, p2.transform_hidden, p2.transform_init_scale, derive_seed(seed, "transform-init", 0)),
        prox: p2.prox.clone(),
        top_r: p2.top_r.map(|r| r.min(k)),
    }
}

pub fn evaluation_metrics(eval: &Evaluation, tasks: &[RetrievalTask]) -> Result<SplitMetrics> {
    let per_task: Vec<(Vec<f64>, Vec<u8>)> = eval
        .predictions
        .iter()
        .zip(tasks)
        .map(|(p, t)| (p.probabilities.clone(), t.query_labels.clone()))
        .collect();
    split_metrics(&per_task, DEFAULT_ECE_BINS)
}

/// Per-epoch training record joined with the frozen-memory diagnostics,
/// emitted every `diag_period` epochs and at the last epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub active_jaccard: f64,
    pub mean_l0: f64,
    pub mean_l0_tilde: f64,
    pub kappa: f64,
    pub mu: f64,
    pub eps_hat: f64,
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub sv1: f64,
    pub sv2: f64,
    pub fisher_eig1: f64,
    pub fisher_eig2: f64,
}

pub fn diagnostics(history: &[EpochLog], p1: &Phase1Artifacts, period: usize) -> Vec<DiagnosticRow> {
    let eig = fastweight_core::linalg::sym_eigen_desc(&p1.fisher).0;
    let sv = &p1.pca.singular_values;
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let eigs: Vec<f64> = eig.iter().copied().collect();
    let last = history.last().map(|h| h.epoch);
    history
        .iter()
        .filter(|h| h.epoch % period == 0 || Some(h.epoch) == last)
        .map(|h| DiagnosticRow {
            epoch: h.epoch,
            train_loss: h.train_loss,
            val_loss: h.val_loss,
            val_auc: h.val_auc,
            active_jaccard: h.active_jaccard,
            mean_l0: h.mean_l0,
            mean_l0_tilde: h.mean_l0_tilde,
            kappa: p1.memory.kappa(),
            mu: p1.memory.mu(),
            eps_hat: p1.certificate.eps_hat,
            eps_lo: p1.certificate.pct90.lo,
            eps_hi: p1.certificate.pct90.hi,
            sv1: at(sv, 0),
            sv2: at(sv, 1),
            fisher_eig1: at(&eigs, 0),
            fisher_eig2: at(&eigs, 1),
        })
        .collect()
}

/// One validation cell of the post-training `(gamma, top_r)` selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionCell {
    pub gamma: f64,
    pub top_r: usize,
    pub val_auc: f64,
    pub mean_l0_tilde: f64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedRetrieval {
    pub support_size: usize,
    pub op: RetrievalOperator,
    pub outcome: TrainOutcome,
    /// Trained network with the validation-selected `gamma` and `top_r`.
    pub model: RetrievalModel,
    pub selection: Vec<SelectionCell>,
    pub train: Vec<RetrievalTask>,
    pub val: Vec<RetrievalTask>,
    pub test: Vec<RetrievalTask>,
    pub test_eval: Evaluation,
    pub test_metrics: SplitMetrics,
    pub val_metrics: SplitMetrics,
}

/// Builds the retrieval splits at one support size, trains on the training
/// split with early stopping on the validation split, selects `gamma` and
/// `top_r` on the validation split and scores the test split once.
pub fn train_at(cfg: &RunConfig, prep: &Prepared, p1: &Phase1Artifacts, support_size: Option<usize>) -> Result<TrainedRetrieval> {
    let op = stage("phase2", RetrievalOperator::new(&p1.memory))?;
    let train = stage("phase2", retrieval_tasks(cfg, prep, p1, Partition::RetTrain, support_size))?;
    let val = stage("phase2", retrieval_tasks(cfg, prep, p1, Partition::RetVal, support_size))?;
    let test = stage("phase2", retrieval_tasks(cfg, prep, p1, Partition::RetTest, support_size))?;
    let d_z = train.first().map(|t| t.descriptor.len()).ok_or_else(|| PipelineError::Missing("training tasks".into()))?;
    let model = initial_model(cfg, d_z, op.k());
    let outcome = stage("train", fastweight_core::retrieval::train_retrieval(model, &op, &train, &val, &cfg.phase2.train))?;
    let lambda_outer = cfg.phase2.train.outer_lambda.unwrap_or(outcome.model.prox.lambda);
    let (model, selection) = stage("select", select_on_validation(cfg, &outcome.model, &op, &val))?;
    let val_eval = stage("evaluate", evaluate(&model, &op, &val, lambda_outer, cfg.phase2.train.eta))?;
    let test_eval = stage("evaluate", evaluate(&model, &op, &test, lambda_outer, cfg.phase2.train.eta))?;
    let test_metrics = evaluation_metrics(&test_eval, &test)?;
    let val_metrics = evaluation_metrics(&val_eval, &val)?;
    Ok(TrainedRetrieval {
        support_size: support_size.unwrap_or(cfg.generator.n_support),
        op,
        outcome,
        model,
        selection,
        train,
        val,
        test,
        test_eval,
        test_metrics,
        val_metrics,
    })
}

#[derive(Debug, Clone)]
pub struct Phase2Artifacts {
    pub main: TrainedRetrieval,
    pub diagnostics: Vec<DiagnosticRow>,
    pub sweep: Vec<SweepCell>,
    /// Per-task solve-and-compose wall time in milliseconds.
    pub latency_ms: Vec<f64>,
    pub log: RunLog,
}

pub fn run_phase2(cfg: &RunConfig, prep: &Prepared, p1: &Phase1Artifacts) -> Result<Phase2Artifacts> {
    let mut log = RunLog::new();
    let main = train_at(cfg, prep, p1, None)?;
    let o = &main.outcome;
    log.record(
        "train",
        "done",
        &[("epochs", &o.history.len()), ("best_epoch", &o.best_epoch), ("stopped_early", &o.stopped_early)],
    );
    log.record(
        "evaluate",
        "test",
        &[("auc_task_mean", &main.test_metrics.auc_task_mean), ("auc_pooled", &main.test_metrics.pooled.auc)],
    );
    let diagnostics = diagnostics(&o.history, p1, cfg.phase2.diag_period);
    let sweep = stage(
        "sweep",
        sweep_lambda_eta(&cfg.grids.lambda, &cfg.grids.eta, |l, e| evaluate_cell(&main.model, &main.op, &main.val, l, e)),
    )?;
    let latency_ms = stage("latency", latency(&main))?;
    Ok(Phase2Artifacts {
        main,
        diagnostics,
        sweep,
        latency_ms,
        log,
    })
}

/// Validation AUC of the trained network under every `(gamma, top_r)` grid
/// pair; the best pair is kept, ties going to the earlier grid entry.
pub fn select_on_validation(
    cfg: &RunConfig,
    base: &RetrievalModel,
    op: &RetrievalOperator,
    val: &[RetrievalTask],
) -> Result<(RetrievalModel, Vec<SelectionCell>)> {
    let lambda_outer = cfg.phase2.train.outer_lambda.unwrap_or(base.prox.lambda);
    let mut cells = Vec::new();
    let mut best: Option<(usize, f64, RetrievalModel)> = None;
    for &g in &cfg.grids.gamma {
        for &r in &cfg.grids.r {
            let mut m = base.clone();
            m.prox.gamma = g;
            m.top_r = Some(r.min(op.k()));
            let e = evaluate(&m, op, val, lambda_outer, cfg.phase2.train.eta)?;
            if best.as_ref().is_none_or(|b| e.mean_auc > b.1) {
                best = Some((cells.len(), e.mean_auc, m));
            }
            cells.push(SelectionCell {
                gamma: g,
                top_r: r.min(op.k()),
                val_auc: e.mean_auc,
                mean_l0_tilde: e.mean_l0_tilde,
                selected: false,
            });
        }
    }
    let (i, _, model) = best.ok_or_else(|| PipelineError::Config("empty gamma or r grid".into()))?;
    cells[i].selected = true;
    Ok((model, cells))
}

/// Times only the proximal solve and the composition, with the network
/// output computed beforehand.
pub fn latency(tr: &TrainedRetrieval) -> Result<Vec<f64>> {
    let model = &tr.model;
    let mut out = Vec::with_capacity(tr.test.len());
    for t in &tr.test {
        let v = model.net.forward(&model.transform.apply(&t.descriptor)?)?;
        let start = Instant::now();
        let sol = retrieve(&tr.op, &t.theta_hat, &v, &model.prox, model.top_r)?;
        let theta = tr.op.compose(&sol.w_tilde);
        let elapsed = start.elapsed();
        std::hint::black_box(theta);
        out.push(elapsed.as_secs_f64() * 1e3);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewShotRow {
    pub support_size: usize,
    pub auc_task_mean: f64,
    pub auc_pooled: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub ece: f64,
    pub support_ridge_auc: f64,
    pub oracle_auc: f64,
    pub ratio_to_oracle: f64,
    pub epochs: usize,
}

/// Ridge fitted on the query set itself and scored on it: an upper
/// reference no support-based method can be expected to beat.
pub fn oracle_ridge_auc(cfg: &RunConfig, prep: &Prepared) -> Result<f64> {
    let fmap = &prep.corpus.feature_map;
    let aucs = prep
        .tasks_in(&[Partition::RetTest])
        .par_iter()
        .map(|t| {
            let theta = ridge_on_samples(&t.query, fmap, cfg.phase1.ridge_alpha)?;
            let p: Vec<f64> = t.query.iter().map(|s| sigmoid(theta.dot(&fmap.apply(&s.x)))).collect();
            let y: Vec<u8> = t.query.iter().map(|s| s.y).collect();
            auc(&p, &y)
        })
        .collect::<fastweight_core::Result<Vec<_>>>()?;
    Ok(fastweight_core::stats::mean(&aucs))
}

/// Mean test AUC of per-task support ridge at a support size.
pub fn support_ridge_auc(cfg: &RunConfig, prep: &Prepared, n: usize) -> Result<f64> {
    let fmap = &prep.corpus.feature_map;
    let aucs = prep
        .tasks_in(&[Partition::RetTest])
        .par_iter()
        .map(|t| {
            let theta = ridge_on_samples(t.support_prefix(n)?, fmap, cfg.phase1.ridge_alpha)?;
            let p: Vec<f64> = t.query.iter().map(|s| sigmoid(theta.dot(&fmap.apply(&s.x)))).collect();
            let y: Vec<u8> = t.query.iter().map(|s| s.y).collect();
            auc(&p, &y)
        })
        .collect::<fastweight_core::Result<Vec<_>>>()?;
    Ok(fastweight_core::stats::mean(&aucs))
}

/// Retrains and evaluates retrieval at every configured support size.
pub fn few_shot(cfg: &RunConfig, prep: &Prepared, p1: &Phase1Artifacts) -> Result<Vec<FewShotRow>> {
    let oracle = oracle_ridge_auc(cfg, prep)?;
    cfg.phase2
        .support_sizes
        .iter()
        .map(|&n| {
            let tr = train_at(cfg, prep, p1, Some(n))?;
            let m = &tr.test_metrics;
            Ok(FewShotRow {
                support_size: n,
                auc_task_mean: m.auc_task_mean,
                auc_pooled: m.pooled.auc,
                accuracy: m.pooled.accuracy,
                f1: m.pooled.f1,
                ece: m.pooled.ece,
                support_ridge_auc: support_ridge_auc(cfg, prep, n)?,
                oracle_auc: oracle,
                ratio_to_oracle: m.auc_task_mean / oracle,
                epochs: tr.outcome.history.len(),
            })
        })
        .collect()
}
