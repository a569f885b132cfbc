use fastweight_core::adapters::{assemble_theta, AdapterMatrix, Canonicalizer};
use fastweight_core::descriptors::{ProbeHead, Standardizer};
use fastweight_core::prototypes::{
    cluster_prototypes, coverage_certificate, merge_prototypes, ClusterReport, CoverageCertificate, PrototypeMemory, Projection,
};
use fastweight_core::seeds::derive_seed;
use fastweight_core::spectral::{
    default_fisher_reg, fisher_energy_test, fisher_matrix, jl_outside_energy, pca, rank_from_singular_values, sequential_r_selection,
    spectrum_of, support_gradients, DimTestReport, JlConfig, JlReport, PcaFit, SequentialReport,
};
use fastweight_core::stats::{median, Resampler};
use fastweight_core::synthdata::Partition;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::prepare::Prepared;
use crate::runlog::RunLog;
use crate::{stage, PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RankSource {
    Fisher,
    /// The Fisher test selected nothing; the energy rank was kept.
    PcaFallback,
    Fixed,
}

impl RankSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RankSource::Fisher => "fisher",
            RankSource::PcaFallback => "pca-fallback",
            RankSource::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KCandidate {
    pub k: usize,
    pub k_after_merge: usize,
    pub mu: f64,
    pub kappa: f64,
    pub eps_hat: f64,
    pub eps_upper: f64,
    pub cluster_stability: f64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct Phase1Artifacts {
    pub seed: u64,
    pub theta_seed: AdapterMatrix,
    pub theta_rest: AdapterMatrix,
    pub canon: Canonicalizer,
    pub pca: PcaFit,
    pub r_pca: usize,
    pub rank_by_rho: Vec<(f64, usize)>,
    pub fisher: DMatrix<f64>,
    pub dim_test: DimTestReport,
    pub sequential: Option<SequentialReport>,
    pub r: usize,
    pub r_source: RankSource,
    pub k_candidates: Vec<KCandidate>,
    pub cluster: ClusterReport,
    pub memory: PrototypeMemory,
    pub certificate: CoverageCertificate,
    pub jl: Option<JlReport>,
    pub probe: ProbeHead,
    pub standardizer: Standardizer,
    pub log: RunLog,
}

impl Phase1Artifacts {
    pub fn basis(&self) -> &DMatrix<f64> {
        self.memory.projection().basis()
    }
}

fn theta_of(prep: &Prepared, partitions: &[Partition], alpha: f64) -> Result<AdapterMatrix> {
    let (rows, ids) = prep.adapters_in(partitions);
    Ok(assemble_theta(&rows, &ids, alpha)?)
}

/// Seed-task Fisher information of the probe head, averaged over tasks.
pub fn seed_fisher(prep: &Prepared, probe: &ProbeHead) -> Result<DMatrix<f64>> {
    let tasks = prep.tasks_in(&[Partition::PreSeed]);
    let d = prep.corpus.feature_map.d_theta();
    let mats = tasks
        .par_iter()
        .map(|t| fisher_matrix(&support_gradients(t, probe, &prep.corpus.feature_map)?))
        .collect::<fastweight_core::Result<Vec<_>>>()?;
    let mut f = DMatrix::zeros(d, d);
    for m in &mats {
        f += m;
    }
    Ok(f / mats.len().max(1) as f64)
}

/// Memory construction: seed adapters, canonicalisation, energy rank, Fisher
/// test around it, frozen projection, clustering over the K grid with
/// merging, coverage certification on the held-back pretraining adapters,
/// and the descriptor standardiser.
pub fn run_phase1(cfg: &RunConfig, prep: &Prepared) -> Result<Phase1Artifacts> {
    let p1 = &cfg.phase1;
    let seed = cfg.seed();
    let mut log = RunLog::new();
    let theta_seed = stage("adapters", theta_of(prep, &[Partition::PreSeed], p1.ridge_alpha))?;
    let theta_rest = stage("adapters", theta_of(prep, &[Partition::PreRest], p1.ridge_alpha))?;
    log.record("adapters", "seed", &[("n_seed", &theta_seed.n()), ("n_rest", &theta_rest.n())]);

    let canon = if p1.canonicalize {
        stage("canonicalize", Canonicalizer::fit(&theta_seed))?
    } else {
        Canonicalizer::identity(theta_seed.d_theta())
    };
    let canonical = canon.apply_matrix(&theta_seed);
    let pca_fit = stage("rank", pca(&canonical.rows))?;
    let r_pca = stage("rank", rank_from_singular_values(&pca_fit.singular_values, p1.rho))?;
    let rank_by_rho = cfg
        .rho_list
        .iter()
        .map(|&rho| Ok((rho, rank_from_singular_values(&pca_fit.singular_values, rho)?)))
        .collect::<Result<Vec<_>>>()?;
    log.record("rank", "pca", &[("rho", &p1.rho), ("r_pca", &r_pca)]);

    let probe = ProbeHead::random(prep.corpus.feature_map.d_theta(), derive_seed(seed, "probe-head", 0));
    let fisher = stage("fisher", seed_fisher(prep, &probe))?;
    let spectrum = spectrum_of(&fisher, default_fisher_reg(&fisher), cfg.generator.n_support);
    let dim_test = stage(
        "fisher",
        fisher_energy_test(&spectrum, r_pca, &Resampler::random(p1.n_boot, derive_seed(seed, "dim-test", 0)), p1.dim_alpha),
    )?;
    for rec in &dim_test.records {
        log.record(
            "fisher",
            "candidate",
            &[("r", &rec.r_cand), ("zeta", &rec.zeta_emp), ("p_raw", &rec.p_raw), ("p_adj", &rec.p_adj), ("reject", &rec.reject)],
        );
    }
    let sequential = match sequential_r_selection(&canonical, r_pca, p1.n_boot, derive_seed(seed, "sequential-r", 0)) {
        Ok(s) => {
            log.record("rank", "sequential", &[("selected", &s.selected_r)]);
            Some(s)
        }
        Err(e) => {
            log.note("rank", &format!("sequential selection skipped: {e}"));
            None
        }
    };

    let (r, r_source) = match (p1.fixed_r, dim_test.selected_r) {
        (Some(r), _) => (r, RankSource::Fixed),
        (None, Some(r)) => (r, RankSource::Fisher),
        (None, None) => (r_pca, RankSource::PcaFallback),
    };
    if r == 0 || r > theta_seed.d_theta() {
        return Err(PipelineError::Config(format!("rank {r} outside 1..={}", theta_seed.d_theta())));
    }
    log.record("rank", "selected", &[("r", &r), ("source", &r_source.as_str())]);

    let projection = stage("projection", Projection::from_canonical_pca(&canon, &pca_fit.components, r))?;
    let norm_scale = median(&(0..theta_seed.n()).map(|i| theta_seed.row(i).norm()).collect::<Vec<_>>());
    let target = p1.coverage_target * norm_scale;

    let mut k_grid: Vec<usize> = cfg.grids.k.iter().copied().filter(|&k| k <= theta_seed.n()).collect();
    k_grid.sort_unstable();
    k_grid.dedup();
    if k_grid.is_empty() {
        return Err(PipelineError::Config(format!("every K in the grid exceeds the {} seed adapters", theta_seed.n())));
    }
    let mut built = Vec::with_capacity(k_grid.len());
    for &k in &k_grid {
        let (mut memory, cluster) = stage(
            "cluster",
            cluster_prototypes(&theta_seed, &projection, k, p1.n_restarts, derive_seed(seed, "cluster", k as u64)),
        )?;
        let s = p1.r_sparse.min(r);
        let events = stage("merge", merge_prototypes(&mut memory, &p1.merge, Some((&theta_seed, s))))?;
        for e in &events {
            log.record("merge", "event", &[("k_grid", &k), ("detail", &e.log_line())]);
        }
        memory.freeze();
        let s = s.min(memory.k());
        let cert = stage(
            "certificate",
            coverage_certificate(&mut memory, &theta_rest, s, p1.l0_mode, &Resampler::random(p1.n_boot, derive_seed(seed, "coverage", k as u64))),
        )?;
        built.push((k, memory, cluster, cert));
    }
    let chosen = built.iter().position(|b| b.3.pct90.hi <= target).unwrap_or(built.len() - 1);
    let k_candidates = built
        .iter()
        .enumerate()
        .map(|(i, (k, m, c, cert))| KCandidate {
            k: *k,
            k_after_merge: m.k(),
            mu: m.mu(),
            kappa: m.kappa(),
            eps_hat: cert.eps_hat,
            eps_upper: cert.pct90.hi,
            cluster_stability: c.stability,
            selected: i == chosen,
        })
        .collect::<Vec<_>>();
    for c in &k_candidates {
        log.record(
            "certificate",
            "k-candidate",
            &[("k", &c.k), ("k_merged", &c.k_after_merge), ("eps_hat", &c.eps_hat), ("eps_upper", &c.eps_upper), ("selected", &c.selected)],
        );
    }
    let (_, memory, cluster, certificate) = built.swap_remove(chosen);
    log.record("certificate", "target", &[("target", &target), ("k", &memory.k())]);

    let jl = jl_check(cfg, &theta_rest, &fisher, r, &mut log);

    let pre = prep.tasks_in(&[Partition::PreSeed, Partition::PreRest]);
    let standardizer = stage(
        "standardize",
        Standardizer::fit(&pre, &probe, &prep.corpus.feature_map, memory.projection().basis(), &cfg.phase2.descriptor),
    )?;

    Ok(Phase1Artifacts {
        seed,
        theta_seed,
        theta_rest,
        canon,
        pca: pca_fit,
        r_pca,
        rank_by_rho,
        fisher,
        dim_test,
        sequential,
        r,
        r_source,
        k_candidates,
        cluster,
        memory,
        certificate,
        jl,
        probe,
        standardizer,
        log,
    })
}

/// Random-projection leakage check; the target dimension is raised above
/// `r` when the configured one is too small and the check is skipped when
/// no valid dimension exists.
fn jl_check(cfg: &RunConfig, theta_rest: &AdapterMatrix, fisher: &DMatrix<f64>, r: usize, log: &mut RunLog) -> Option<JlReport> {
    let d = theta_rest.d_theta();
    let mut jl = JlConfig {
        seed: derive_seed(cfg.seed(), "jl", 0),
        ..cfg.phase1.jl.clone()
    };
    if jl.target_dim <= r {
        jl.target_dim = r + 1;
    }
    if jl.target_dim >= d {
        log.note("jl", &format!("skipped: no target dimension between r = {r} and d = {d}"));
        return None;
    }
    match jl_outside_energy(&theta_rest.rows, fisher, r, &jl) {
        Ok(rep) => {
            log.record("jl", "leakage", &[("mean", &rep.mean_fraction), ("upper", &rep.upper_bound), ("accepted", &rep.accepted)]);
            Some(rep)
        }
        Err(e) => {
            log.note("jl", &format!("skipped: {e}"));
            None
        }
    }
}
