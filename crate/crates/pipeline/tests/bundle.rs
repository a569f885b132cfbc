use std::collections::HashSet;

use fastweight_core::synthdata::Partition;
use fastweight_pipeline::phase1::{run_phase1, RankSource};
use fastweight_pipeline::phase2::retrieval_tasks;
use fastweight_pipeline::prepare::prepare;
use fastweight_pipeline::report::emit_report;
use fastweight_pipeline::run::{run_steps, Step};
use fastweight_pipeline::RunConfig;

const PHASE1_FILES: [&str; 10] = [
    "config.json",
    "tasks.csv",
    "rank_by_rho.csv",
    "spectrum.csv",
    "dim_test.csv",
    "k_grid.csv",
    "memory.csv",
    "prototypes.csv",
    "run.log",
    "summary.txt",
];

#[test]
fn phase1_only_bundle() {
    let cfg = RunConfig::desk();
    let run = run_steps(&cfg, &[Step::Phase1], &[]).unwrap();
    assert!(run.phase2.is_none());
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&cfg, &run, dir.path()).unwrap();
    for f in PHASE1_FILES {
        assert!(dir.path().join(f).is_file(), "{f} missing");
        assert!(written.iter().any(|w| w == f), "{f} not listed");
    }
    for f in ["metrics.csv", "training_curve.csv", "few_shot.csv", "motif_null.csv"] {
        assert!(!dir.path().join(f).exists(), "{f} written without its stage");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains(&cfg.hash()));
    let tasks = std::fs::read_to_string(dir.path().join("tasks.csv")).unwrap();
    assert_eq!(tasks.lines().count(), cfg.generator.n_tasks + 1);
}

#[test]
fn planted_rank_and_certified_memory() {
    let cfg = RunConfig::desk();
    let prep = prepare(&cfg).unwrap();
    let p1 = run_phase1(&cfg, &prep).unwrap();
    assert_eq!(p1.r_pca, cfg.generator.r_true);
    assert_eq!((p1.r, p1.r_source), (cfg.generator.r_true, RankSource::Fisher));
    assert_eq!(p1.memory.r(), p1.r);
    assert!(p1.memory.is_frozen());
    assert_eq!(p1.k_candidates.iter().filter(|c| c.selected).count(), 1);
    assert!(p1.certificate.pct90.lo <= p1.certificate.eps_hat && p1.certificate.eps_hat <= p1.certificate.pct90.hi);
}

#[test]
fn memory_sees_only_pretraining_tasks() {
    let cfg = RunConfig::desk();
    let prep = prepare(&cfg).unwrap();
    let p1 = run_phase1(&cfg, &prep).unwrap();
    let ids = |p: Partition| prep.tasks_in(&[p]).iter().map(|t| t.task_id.clone()).collect::<HashSet<_>>();
    assert!(p1.theta_seed.task_ids.iter().all(|id| ids(Partition::PreSeed).contains(id)));
    assert!(p1.theta_rest.task_ids.iter().all(|id| ids(Partition::PreRest).contains(id)));
    let all: usize = [Partition::PreSeed, Partition::PreRest, Partition::RetTrain, Partition::RetVal, Partition::RetTest]
        .iter()
        .map(|&p| ids(p).len())
        .sum();
    assert_eq!(all, cfg.generator.n_tasks);

    // rewriting every retrieval task leaves phase 1 untouched
    let mut altered = prep.clone();
    for t in altered.corpus.tasks.iter_mut().filter(|t| !t.partition().unwrap().is_pretraining()) {
        for s in t.support.iter_mut().chain(t.query.iter_mut()) {
            s.y = 1 - s.y;
        }
    }
    let q1 = run_phase1(&cfg, &altered).unwrap();
    assert_eq!(q1.memory.rows(), p1.memory.rows());
    assert_eq!(q1.standardizer, p1.standardizer);

    assert!(retrieval_tasks(&cfg, &prep, &p1, Partition::PreSeed, None).is_err());
}

#[test]
fn descriptors_ignore_query_labels() {
    let cfg = RunConfig::desk();
    let prep = prepare(&cfg).unwrap();
    let p1 = run_phase1(&cfg, &prep).unwrap();
    let before = retrieval_tasks(&cfg, &prep, &p1, Partition::RetTest, Some(5)).unwrap();
    let mut altered = prep.clone();
    for t in altered.corpus.tasks.iter_mut() {
        for s in t.query.iter_mut() {
            s.y = 1 - s.y;
        }
    }
    let after = retrieval_tasks(&cfg, &altered, &p1, Partition::RetTest, Some(5)).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.descriptor, b.descriptor);
        assert_eq!(a.theta_hat, b.theta_hat);
    }
}
