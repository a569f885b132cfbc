//! Synthetic episodic tasks with planted low-dimensional adapter structure,
//! and the nested partition of tasks into pretraining and retrieval splits.
//!
//! Embeddings are standard Gaussian in `R^q`. A fixed linear feature map
//! `F = U A (+ feature_noise * G)` plays the role of the frozen encoder, where
//! `U` spans the planted `r_true`-dimensional subspace. Each task draws a
//! planted adapter `theta = U c + noise_sigma * xi` with `xi` a unit vector
//! orthogonal to `span(U)`, and labels are Bernoulli with probability
//! `sigmoid(<theta, F x>)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{cosine, gaussian_matrix, gaussian_vector, random_orthonormal};
use crate::seeds::{derive_seed, rng_from, stream};
use crate::{CoreError, Result};

pub use crate::stats::spearman;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d_theta: usize,
    pub q: usize,
    pub r_true: usize,
    pub n_tasks: usize,
    pub n_support: usize,
    pub n_query: usize,
    /// Norm of the off-subspace component of each planted adapter.
    pub noise_sigma: f64,
    /// Scale of a full-rank perturbation of the feature map; 0 keeps every
    /// feature vector inside the planted subspace.
    pub feature_noise: f64,
    pub n_families: usize,
    /// Angular spread of task directions around their family centre.
    pub family_spread: f64,
    /// Norm of the in-subspace component of each planted adapter.
    pub signal_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_theta: 8,
            q: 8,
            r_true: 2,
            n_tasks: 300,
            n_support: 50,
            n_query: 100,
            noise_sigma: 0.0,
            feature_noise: 0.0,
            n_families: 6,
            family_spread: 0.15,
            signal_scale: 4.0,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.d_theta == 0 || self.q == 0 || self.r_true == 0 || self.n_tasks == 0 {
            return bad("d_theta, q, r_true and n_tasks must be positive".into());
        }
        if self.r_true > self.d_theta {
            return bad(format!(
                "r_true = {} exceeds d_theta = {}",
                self.r_true, self.d_theta
            ));
        }
        if self.r_true > self.q {
            return bad(format!("r_true = {} exceeds q = {}", self.r_true, self.q));
        }
        if self.n_support < 2 {
            return bad("n_support must be at least 2 so both classes appear".into());
        }
        if self.n_query == 0 {
            return bad("n_query must be positive".into());
        }
        if self.n_families == 0 {
            return bad("n_families must be positive".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("feature_noise", self.feature_noise),
            ("family_spread", self.family_spread),
            ("signal_scale", self.signal_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    PreSeed,
    PreRest,
    RetTrain,
    RetVal,
    RetTest,
}

impl Partition {
    pub fn is_pretraining(self) -> bool {
        matches!(self, Partition::PreSeed | Partition::PreRest)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::PreSeed => "pre-seed",
            Partition::PreRest => "pre-rest",
            Partition::RetTrain => "ret-train",
            Partition::RetVal => "ret-val",
            Partition::RetTest => "ret-test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Corpus-wide sample index.
    pub index: usize,
    pub x: DVector<f64>,
    pub y: u8,
    /// Synthetic covariate that rises with the true positive probability.
    pub age: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTask {
    pub task_id: String,
    pub family: usize,
    /// Ordered so that classes alternate; every prefix of length >= 2 holds
    /// both classes, which makes nested support subsampling well defined.
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
    partition: Option<Partition>,
    pub theta_true: Option<DVector<f64>>,
}

impl EpisodeTask {
    pub fn new(task_id: impl Into<String>, support: Vec<Sample>, query: Vec<Sample>) -> Self {
        Self {
            task_id: task_id.into(),
            family: 0,
            support,
            query,
            partition: None,
            theta_true: None,
        }
    }

    pub fn partition(&self) -> Option<Partition> {
        self.partition
    }

    /// Tags the task with its partition. A task is tagged exactly once.
    pub fn assign_partition(&mut self, partition: Partition) -> Result<()> {
        match self.partition {
            Some(existing) if existing != partition => Err(CoreError::Leakage(format!(
                "task {} already frozen in {}",
                self.task_id,
                existing.as_str()
            ))),
            _ => {
                self.partition = Some(partition);
                Ok(())
            }
        }
    }

    /// The first `n` support samples.
    pub fn support_prefix(&self, n: usize) -> Result<&[Sample]> {
        if n == 0 || n > self.support.len() {
            return Err(CoreError::InvalidConfig(format!(
                "support size {n} outside 1..={}",
                self.support.len()
            )));
        }
        Ok(&self.support[..n])
    }

    /// A copy of the task whose support is cut to its first `n` samples.
    pub fn with_support_size(&self, n: usize) -> Result<EpisodeTask> {
        let mut out = self.clone();
        out.support = self.support_prefix(n)?.to_vec();
        Ok(out)
    }
}

/// The frozen encoder surrogate `x -> F x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub matrix: DMatrix<f64>,
}

impl FeatureMap {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
        }
    }

    pub fn d_theta(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn q(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    /// Row-stacked features of a sample set (`n x d_theta`).
    pub fn features(&self, samples: &[Sample]) -> DMatrix<f64> {
        let d = self.d_theta();
        let mut out = DMatrix::zeros(samples.len(), d);
        for (i, s) in samples.iter().enumerate() {
            out.row_mut(i).copy_from(&self.apply(&s.x).transpose());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: GeneratorConfig,
    pub feature_map: FeatureMap,
    /// Orthonormal `d_theta x r_true` basis of the planted subspace.
    pub planted_basis: DMatrix<f64>,
    pub tasks: Vec<EpisodeTask>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn draw_sample<R: Rng + ?Sized>(
    rng: &mut R,
    theta: &DVector<f64>,
    fmap: &FeatureMap,
    index: usize,
) -> Sample {
    let x = gaussian_vector(fmap.q(), rng);
    let logit = theta.dot(&fmap.apply(&x));
    let p = sigmoid(logit);
    let y = u8::from(rng.random::<f64>() < p);
    let age = 45.0 + 15.0 * p + 5.0 * rng.sample::<f64, _>(StandardNormal);
    Sample { index, x, y, age }
}

/// Generates the corpus; a pure function of `cfg` (including its seed).
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut global = stream(cfg.seed, "corpus-global", 0);
    let basis = random_orthonormal(cfg.d_theta, cfg.r_true, &mut global);
    let mixing = gaussian_matrix(cfg.r_true, cfg.q, &mut global) / (cfg.r_true as f64).sqrt();
    let mut fmatrix = &basis * mixing;
    let perturbation = gaussian_matrix(cfg.d_theta, cfg.q, &mut global) / (cfg.q as f64).sqrt();
    if cfg.feature_noise > 0.0 {
        fmatrix += perturbation * cfg.feature_noise;
    }
    let feature_map = FeatureMap { matrix: fmatrix };
    let centres: Vec<DVector<f64>> = (0..cfg.n_families)
        .map(|f| {
            if cfg.r_true == 2 {
                let angle = 2.0 * std::f64::consts::PI * f as f64 / cfg.n_families as f64;
                DVector::from_vec(vec![angle.cos(), angle.sin()])
            } else {
                gaussian_vector(cfg.r_true, &mut global).normalize()
            }
        })
        .collect();
    let complement = &DMatrix::identity(cfg.d_theta, cfg.d_theta) - &basis * basis.transpose();

    let per_task = cfg.n_support + cfg.n_query;
    let tasks: Result<Vec<EpisodeTask>> = (0..cfg.n_tasks)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(cfg.seed, "corpus-task", t as u64);
            let family = t % cfg.n_families;
            let direction = (&centres[family]
                + gaussian_vector(cfg.r_true, &mut rng) * cfg.family_spread)
                .normalize();
            let mut theta = &basis * direction * cfg.signal_scale;
            if cfg.noise_sigma > 0.0 && cfg.r_true < cfg.d_theta {
                let off = &complement * gaussian_vector(cfg.d_theta, &mut rng);
                let norm = off.norm();
                if norm > 0.0 {
                    theta += off * (cfg.noise_sigma / norm);
                }
            }

            let base = t * per_task;
            let n_pos = cfg.n_support.div_ceil(2);
            let n_neg = cfg.n_support - n_pos;
            let mut pos = Vec::with_capacity(n_pos);
            let mut neg = Vec::with_capacity(n_neg);
            let mut attempts = 0usize;
            while pos.len() < n_pos || neg.len() < n_neg {
                attempts += 1;
                if attempts > 10_000 * cfg.n_support {
                    return Err(CoreError::Degenerate(format!(
                        "task {t}: could not draw both classes for the support set"
                    )));
                }
                let s = draw_sample(&mut rng, &theta, &feature_map, 0);
                if s.y == 1 && pos.len() < n_pos {
                    pos.push(s);
                } else if s.y == 0 && neg.len() < n_neg {
                    neg.push(s);
                }
            }
            let mut support = Vec::with_capacity(cfg.n_support);
            let mut pos_it = pos.into_iter();
            let mut neg_it = neg.into_iter();
            for i in 0..cfg.n_support {
                let s = if i % 2 == 0 {
                    pos_it.next().or_else(|| neg_it.next())
                } else {
                    neg_it.next().or_else(|| pos_it.next())
                };
                let mut s = s.expect("class counts add up to n_support");
                s.index = base + i;
                support.push(s);
            }
            let query = (0..cfg.n_query)
                .map(|i| draw_sample(&mut rng, &theta, &feature_map, base + cfg.n_support + i))
                .collect();
            Ok(EpisodeTask {
                task_id: format!("task-{t:05}"),
                family,
                support,
                query,
                partition: None,
                theta_true: Some(theta),
            })
        })
        .collect();

    Ok(Corpus {
        config: cfg.clone(),
        feature_map,
        planted_basis: basis,
        tasks: tasks?,
    })
}

impl Corpus {
    /// Fresh i.i.d. samples from task `task`'s label model, independent of its
    /// stored support and query sets.
    pub fn draw_fresh(&self, task: usize, n: usize, stream_index: u64) -> Result<Vec<Sample>> {
        let t = self
            .tasks
            .get(task)
            .ok_or_else(|| CoreError::InvalidConfig(format!("no task {task}")))?;
        let theta = t
            .theta_true
            .as_ref()
            .ok_or_else(|| CoreError::Undefined("task has no planted adapter".into()))?;
        let mut rng = rng_from(derive_seed(
            self.config.seed,
            "corpus-fresh",
            (task as u64) << 20 | stream_index,
        ));
        Ok((0..n)
            .map(|_| draw_sample(&mut rng, theta, &self.feature_map, usize::MAX))
            .collect())
    }

    pub fn apply_partition(&mut self, assignment: &PartitionAssignment) -> Result<()> {
        if assignment.partitions.len() != self.tasks.len() {
            return Err(CoreError::DimensionMismatch {
                what: "partition assignment",
                expected: self.tasks.len(),
                got: assignment.partitions.len(),
            });
        }
        for (task, p) in self.tasks.iter_mut().zip(&assignment.partitions) {
            task.assign_partition(*p)?;
        }
        Ok(())
    }

    pub fn indices_in(&self, partitions: &[Partition]) -> Vec<usize> {
        self.tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.partition().is_some_and(|p| partitions.contains(&p)))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub frac_pre: f64,
    pub frac_seed: f64,
    pub tau_sim: f64,
    pub frac_ret_train: f64,
    pub frac_ret_val: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            frac_pre: 0.5,
            frac_seed: 0.8,
            tau_sim: 0.8,
            frac_ret_train: 0.6,
            frac_ret_val: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionAssignment {
    pub partitions: Vec<Partition>,
    /// Seed cluster of every pretraining task, if it could be assigned.
    pub seed_cluster: Vec<Option<usize>>,
    pub n_seed_clusters: usize,
}

impl PartitionAssignment {
    pub fn count(&self, p: Partition) -> usize {
        self.partitions.iter().filter(|x| **x == p).count()
    }
}

/// Leader clustering by cosine similarity: each vector joins the most similar
/// existing cluster leader if that similarity reaches `tau_sim`, otherwise it
/// founds a new cluster.
pub fn leader_clusters(directions: &[&DVector<f64>], tau_sim: f64) -> Vec<usize> {
    let mut leaders: Vec<&DVector<f64>> = Vec::new();
    let mut labels = Vec::with_capacity(directions.len());
    for v in directions {
        let best = leaders
            .iter()
            .enumerate()
            .map(|(k, l)| (k, cosine(v, l)))
            .fold(None, |acc: Option<(usize, f64)>, (k, c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((k, c)),
            });
        match best {
            Some((k, c)) if c >= tau_sim => labels.push(k),
            _ => {
                labels.push(leaders.len());
                leaders.push(v);
            }
        }
    }
    labels
}

/// Splits tasks into disjoint pretraining and retrieval sets.
///
/// `directions[i]` is the vector used for cosine similarity of task `i`
/// (typically its ridge adapter). Task order is shuffled with `cfg.seed`; the
/// first `round(frac_pre * N)` tasks are pretraining, of which the first
/// `round(frac_seed * n_pre)` are seeds. Seed clusters are formed by leader
/// clustering at `tau_sim`; remaining pretraining tasks join the seed cluster
/// with the most similar centroid if that similarity reaches `tau_sim`.
pub fn partition_tasks(directions: &[DVector<f64>], cfg: &PartitionConfig) -> Result<PartitionAssignment> {
    for (name, f) in [("frac_pre", cfg.frac_pre), ("frac_seed", cfg.frac_seed)] {
        if !(0.0 < f && f < 1.0) {
            return Err(CoreError::InvalidConfig(format!("{name} must lie in (0, 1)")));
        }
    }
    if !(cfg.frac_ret_train > 0.0 && cfg.frac_ret_val > 0.0 && cfg.frac_ret_train + cfg.frac_ret_val < 1.0) {
        return Err(CoreError::InvalidConfig(
            "retrieval train/val fractions must be positive and leave room for test".into(),
        ));
    }
    let n = directions.len();
    let n_pre = (cfg.frac_pre * n as f64).round() as usize;
    let n_seed = (cfg.frac_seed * n_pre as f64).round() as usize;
    let n_ret = n - n_pre;
    let n_train = (cfg.frac_ret_train * n_ret as f64).round() as usize;
    let n_val = (cfg.frac_ret_val * n_ret as f64).round() as usize;
    let counts = [
        ("pre-seed", n_seed),
        ("pre-rest", n_pre.saturating_sub(n_seed)),
        ("ret-train", n_train),
        ("ret-val", n_val),
        ("ret-test", n_ret.saturating_sub(n_train + n_val)),
    ];
    if let Some((name, _)) = counts.iter().find(|(_, c)| *c == 0) {
        return Err(CoreError::Empty(format!("partition {name} would be empty for {n} tasks")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, "partition", 0));

    let mut partitions = vec![Partition::RetTest; n];
    for (rank, &task) in order.iter().enumerate() {
        partitions[task] = if rank < n_seed {
            Partition::PreSeed
        } else if rank < n_pre {
            Partition::PreRest
        } else if rank < n_pre + n_train {
            Partition::RetTrain
        } else if rank < n_pre + n_train + n_val {
            Partition::RetVal
        } else {
            Partition::RetTest
        };
    }

    let seed_tasks = &order[..n_seed];
    let seed_dirs: Vec<&DVector<f64>> = seed_tasks.iter().map(|&i| &directions[i]).collect();
    let labels = leader_clusters(&seed_dirs, cfg.tau_sim);
    let n_clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let dim = directions.first().map_or(0, |d| d.len());
    let mut centroids = vec![DVector::zeros(dim); n_clusters];
    let mut seed_cluster = vec![None; n];
    for (&task, &label) in seed_tasks.iter().zip(&labels) {
        seed_cluster[task] = Some(label);
        let d = &directions[task];
        let norm = d.norm();
        if norm > 0.0 {
            centroids[label] += d / norm;
        }
    }
    for &task in &order[n_seed..n_pre] {
        let best = centroids
            .iter()
            .enumerate()
            .map(|(k, c)| (k, cosine(&directions[task], c)))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (k, c)| {
                if c > acc.1 {
                    (k, c)
                } else {
                    acc
                }
            });
        if best.0 != usize::MAX && best.1 >= cfg.tau_sim {
            seed_cluster[task] = Some(best.0);
        }
    }

    Ok(PartitionAssignment {
        partitions,
        seed_cluster,
        n_seed_clusters: n_clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen_desc;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            n_tasks: 40,
            n_support: 10,
            n_query: 20,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = small_cfg();
        cfg.r_true = 9;
        assert!(generate_corpus(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.n_support = 1;
        assert!(generate_corpus(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.noise_sigma = -1.0;
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn deterministic_generation() {
        let cfg = small_cfg();
        assert_eq!(generate_corpus(&cfg).unwrap(), generate_corpus(&cfg).unwrap());
    }

    #[test]
    fn full_rank_zero_noise_lies_in_subspace() {
        let cfg = GeneratorConfig {
            r_true: 8,
            ..small_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let b = &corpus.planted_basis;
        for t in &corpus.tasks {
            let theta = t.theta_true.as_ref().unwrap();
            let resid = theta - b * (b.transpose() * theta);
            assert!(resid.norm() < 1e-12);
        }
    }

    #[test]
    fn off_subspace_noise_has_requested_norm() {
        let cfg = GeneratorConfig {
            noise_sigma: 0.3,
            ..small_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let b = &corpus.planted_basis;
        for t in &corpus.tasks {
            let theta = t.theta_true.as_ref().unwrap();
            let resid = theta - b * (b.transpose() * theta);
            assert!((resid.norm() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_energy_concentrates_in_two_directions() {
        let cfg = GeneratorConfig {
            n_tasks: 200,
            ..small_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let thetas: Vec<_> = corpus.tasks.iter().map(|t| t.theta_true.clone().unwrap()).collect();
        let mean = thetas.iter().fold(DVector::zeros(8), |a, t| a + t) / thetas.len() as f64;
        let cov = thetas
            .iter()
            .fold(DMatrix::zeros(8, 8), |a, t| a + (t - &mean) * (t - &mean).transpose());
        let (vals, _) = sym_eigen_desc(&cov);
        let top2 = vals[0] + vals[1];
        assert!(top2 / vals.sum() >= 0.99);
    }

    #[test]
    fn supports_are_balanced_and_disjoint_from_queries() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        for t in &corpus.tasks {
            for n in 2..=t.support.len() {
                let prefix = t.support_prefix(n).unwrap();
                assert!(prefix.iter().any(|s| s.y == 1));
                assert!(prefix.iter().any(|s| s.y == 0));
            }
            for q in &t.query {
                assert!(t.support.iter().all(|s| s.index != q.index));
            }
        }
    }

    #[test]
    fn partition_counts_and_disjointness() {
        let dirs: Vec<DVector<f64>> = (0..200)
            .map(|i| DVector::from_vec(vec![(i as f64).cos(), (i as f64).sin()]))
            .collect();
        let cfg = PartitionConfig::default();
        let a = partition_tasks(&dirs, &cfg).unwrap();
        assert_eq!(a.count(Partition::PreSeed), 80);
        assert_eq!(a.count(Partition::PreRest), 20);
        assert_eq!(
            a.count(Partition::RetTrain) + a.count(Partition::RetVal) + a.count(Partition::RetTest),
            100
        );
        assert_eq!(a, partition_tasks(&dirs, &cfg).unwrap());
        for (p, c) in a.partitions.iter().zip(&a.seed_cluster) {
            if !p.is_pretraining() {
                assert!(c.is_none());
            }
            if *p == Partition::PreSeed {
                assert!(c.is_some());
            }
        }
    }

    #[test]
    fn permissive_threshold_assigns_every_rest_task() {
        let dirs: Vec<DVector<f64>> = (0..50)
            .map(|i| DVector::from_vec(vec![(i as f64).cos(), (i as f64 * 0.7).sin()]))
            .collect();
        let cfg = PartitionConfig {
            tau_sim: -1.0,
            ..PartitionConfig::default()
        };
        let a = partition_tasks(&dirs, &cfg).unwrap();
        for (p, c) in a.partitions.iter().zip(&a.seed_cluster) {
            if p.is_pretraining() {
                assert!(c.is_some());
            }
        }
    }

    #[test]
    fn two_separated_directions_form_two_clusters() {
        let a = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let dirs: Vec<DVector<f64>> = (0..10)
            .map(|i| {
                let base = if i % 2 == 0 { &a } else { &b };
                base * (1.0 + i as f64) + DVector::from_element(3, 0.01 * i as f64)
            })
            .collect();
        let refs: Vec<&DVector<f64>> = dirs.iter().collect();
        let labels = leader_clusters(&refs, 0.8);
        assert_eq!(labels.iter().max(), Some(&1));
    }

    #[test]
    fn empty_partition_rejected() {
        let dirs: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_element(2, 1.0)).collect();
        assert!(matches!(
            partition_tasks(&dirs, &PartitionConfig::default()),
            Err(CoreError::Empty(_))
        ));
    }

    #[test]
    fn partition_is_assigned_once() {
        let mut t = EpisodeTask::new("t", vec![], vec![]);
        t.assign_partition(Partition::PreSeed).unwrap();
        t.assign_partition(Partition::PreSeed).unwrap();
        assert!(t.assign_partition(Partition::RetTest).is_err());
    }

    #[test]
    fn fresh_samples_are_reproducible() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        let a = corpus.draw_fresh(3, 5, 1).unwrap();
        assert_eq!(a, corpus.draw_fresh(3, 5, 1).unwrap());
        assert_ne!(a, corpus.draw_fresh(3, 5, 2).unwrap());
    }
}
