use fastweight_pipeline::config::{FULL_K_GRID, SEEDS};
use fastweight_pipeline::{Ablation, RunConfig};

#[test]
fn json_roundtrip_keeps_hash() {
    let cfg = RunConfig::desk();
    let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
}

#[test]
fn hash_ignores_output_dir_but_not_seed() {
    let cfg = RunConfig::desk();
    let mut moved = cfg.clone();
    moved.output_dir = "/elsewhere".into();
    assert_eq!(moved.hash(), cfg.hash());
    assert_ne!(cfg.with_seed(1).hash(), cfg.hash());
}

#[test]
fn load_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let cfg = RunConfig::full_scale();
    std::fs::write(&path, cfg.to_json()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    assert!(RunConfig::load(&dir.path().join("missing.json")).is_err());
}

#[test]
fn presets() {
    let full = RunConfig::full_scale();
    assert_eq!(full.grids.k, FULL_K_GRID.to_vec());
    assert_eq!(full.phase2.train.learning_rate, 1e-3);
    assert_eq!(full.seeds, SEEDS.to_vec());
    full.validate().unwrap();
    RunConfig::desk().validate().unwrap();
}

#[test]
fn validation_rejects_bad_grids() {
    let mut cfg = RunConfig::desk();
    cfg.grids.k.clear();
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::desk();
    cfg.phase2.support_sizes = vec![1];
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::desk();
    cfg.phase1.rho = 1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn with_seed_moves_every_stream() {
    let c = RunConfig::desk().with_seed(9);
    assert_eq!(c.seed(), 9);
    assert_eq!(c.partition.seed, 9);
    assert_eq!(c.phase2.train.seed, 9);
    assert_eq!(c.motifs.tau.seed, 9);
}

#[test]
fn ablation_labels_parse_and_apply() {
    for a in Ablation::ALL {
        assert_eq!(Ablation::parse(a.label()), Some(a));
        assert_eq!(Ablation::parse(&a.label()[..1]), Some(a));
    }
    assert_eq!(Ablation::parse("nope"), None);
    let base = RunConfig::desk();
    assert_eq!(Ablation::Full.apply(&base), base);
    assert_eq!(Ablation::SoftL1Only.apply(&base).phase2.top_r, None);
    assert_eq!(Ablation::GammaZero.apply(&base).phase2.prox.gamma, 0.0);
    assert_eq!(Ablation::FixedR.apply(&base).phase1.fixed_r, Some(4));
    assert!(!Ablation::NoCanonicalization.apply(&base).phase1.canonicalize);
    assert!(!Ablation::FixedTau.touches_retrieval());
}
