//! Prototype memory: k-means in the frozen PCA subspace, sparse coverage
//! fits with bootstrap certificates, and conditioning/coherence control.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterMatrix, Canonicalizer};
use crate::linalg::{least_squares, singular_values_desc};
use crate::seeds::{derive_seed, rng_from};
use crate::stats::{bca_interval, bootstrap_replicates, jackknife_values, median, percentile_interval, Interval, Resampler};
use crate::{ensure_finite, CoreError, Result};

pub const DEFAULT_MU_THRESHOLD: f64 = 0.95;
pub const DEFAULT_KAPPA_THRESHOLD: f64 = 1e4;
pub const COVERAGE_LEVEL: f64 = 0.90;
const KMEANS_MAX_ITER: usize = 300;

/// Orthonormal projection `theta -> W^T theta` onto the retained PCA
/// directions, expressed in raw adapter coordinates. `scale` is the
/// canonicalisation scale; canonical PCA coordinates are `W^T theta / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    basis: DMatrix<f64>,
    scale: f64,
}

impl Projection {
    pub fn from_basis(basis: DMatrix<f64>, scale: f64) -> Result<Self> {
        let r = basis.ncols();
        if r == 0 || r > basis.nrows() {
            return Err(CoreError::InvalidConfig(format!(
                "projection rank {r} invalid for dimension {}",
                basis.nrows()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(CoreError::InvalidConfig("projection scale must be positive".into()));
        }
        let gram = basis.transpose() * &basis;
        if (gram - DMatrix::identity(r, r)).amax() > 1e-8 {
            return Err(CoreError::InvalidConfig("projection basis is not orthonormal".into()));
        }
        Ok(Self { basis, scale })
    }

    /// `W = B P_r` from a canonicaliser and PCA components fitted on the
    /// canonical adapters.
    pub fn from_canonical_pca(canon: &Canonicalizer, components: &DMatrix<f64>, r: usize) -> Result<Self> {
        if r == 0 || r > components.ncols() {
            return Err(CoreError::InvalidConfig(format!("rank {r} out of range")));
        }
        let basis = &canon.basis * components.columns(0, r);
        Self::from_basis(basis, canon.scale[0])
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn r(&self) -> usize {
        self.basis.ncols()
    }

    pub fn d(&self) -> usize {
        self.basis.nrows()
    }

    pub fn project(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(theta)
    }

    pub fn lift(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.basis * u
    }

    /// Distance from `theta` to the retained subspace.
    pub fn distance(&self, theta: &DVector<f64>) -> f64 {
        (theta - self.lift(&self.project(theta))).norm()
    }

    pub fn canonical_coords(&self, theta: &AdapterMatrix) -> DMatrix<f64> {
        &theta.rows * &self.basis / self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCertificate {
    pub eps_hat: f64,
    pub pct90: Interval,
    pub bca90: Interval,
    pub n_boot: usize,
    /// Per-task residuals the median was taken over.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub kept: usize,
    pub removed: usize,
    pub coherence: f64,
    pub k_after: usize,
    pub mu_after: f64,
    pub kappa_after: f64,
    pub coverage_before: Option<f64>,
    pub coverage_after: Option<f64>,
}

impl MergeEvent {
    pub fn log_line(&self) -> String {
        let cov = match (self.coverage_before, self.coverage_after) {
            (Some(b), Some(a)) => format!(" coverage {b:.6e} -> {a:.6e} (delta {:+.3e})", a - b),
            _ => String::new(),
        };
        format!(
            "merge kept={} removed={} coherence={:.6} K={} mu={:.6} kappa={:.6e}{}",
            self.kept, self.removed, self.coherence, self.k_after, self.mu_after, self.kappa_after, cov
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMemory {
    rows: DMatrix<f64>,
    projection: Projection,
    kappa: f64,
    mu: f64,
    certificate: Option<CoverageCertificate>,
    merge_log: Vec<MergeEvent>,
    frozen: bool,
}

impl PrototypeMemory {
    /// `rows` is `K x d`, one prototype per row in raw adapter coordinates.
    pub fn new(rows: DMatrix<f64>, projection: Projection) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(CoreError::Empty("prototype rows".into()));
        }
        if rows.ncols() != projection.d() {
            return Err(CoreError::DimensionMismatch {
                what: "prototype width",
                expected: projection.d(),
                got: rows.ncols(),
            });
        }
        ensure_finite("prototype rows", rows.iter())?;
        let mut memory = Self {
            rows,
            projection,
            kappa: 1.0,
            mu: 0.0,
            certificate: None,
            merge_log: Vec::new(),
            frozen: false,
        };
        memory.refresh_diagnostics();
        Ok(memory)
    }

    fn refresh_diagnostics(&mut self) {
        let lifted = self.lifted();
        self.kappa = condition_number(&lifted);
        self.mu = mutual_coherence(&self.rows);
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn row(&self, k: usize) -> DVector<f64> {
        self.rows.row(k).transpose()
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn k(&self) -> usize {
        self.rows.nrows()
    }

    pub fn r(&self) -> usize {
        self.projection.r()
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    /// `K x r` prototype coordinates in the retained subspace.
    pub fn lifted(&self) -> DMatrix<f64> {
        &self.rows * self.projection.basis()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn certificate(&self) -> Option<&CoverageCertificate> {
        self.certificate.as_ref()
    }

    pub fn eps_m_hat(&self) -> Option<f64> {
        self.certificate.as_ref().map(|c| c.eps_hat)
    }

    pub fn eps_m_upper(&self) -> Option<f64> {
        self.certificate.as_ref().map(|c| c.pct90.hi)
    }

    pub fn merge_log(&self) -> &[MergeEvent] {
        &self.merge_log
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn replace_rows(&mut self, rows: DMatrix<f64>) -> Result<()> {
        if self.frozen {
            return Err(CoreError::Frozen);
        }
        let fresh = Self::new(rows, self.projection.clone())?;
        self.rows = fresh.rows;
        self.refresh_diagnostics();
        Ok(())
    }

    /// `M^T w`.
    pub fn compose(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != self.k() {
            return Err(CoreError::DimensionMismatch {
                what: "activation vector",
                expected: self.k(),
                got: w.len(),
            });
        }
        Ok(self.rows.tr_mul(w))
    }
}

/// Ratio of extreme singular values over the `min(K, cols)` nonzero-count
/// spectrum; infinite when the smallest is zero.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values_desc(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Largest absolute cosine between distinct rows; zero rows contribute 0.
pub fn mutual_coherence(m: &DMatrix<f64>) -> f64 {
    most_coherent_pair(m).map_or(0.0, |(_, _, c)| c)
}

fn most_coherent_pair(m: &DMatrix<f64>) -> Option<(usize, usize, f64)> {
    best_pair(m, true)
}

fn most_aligned_pair(m: &DMatrix<f64>) -> Option<(usize, usize, f64)> {
    best_pair(m, false)
}

fn best_pair(m: &DMatrix<f64>, absolute: bool) -> Option<(usize, usize, f64)> {
    let k = m.nrows();
    let norms: Vec<f64> = (0..k).map(|i| m.row(i).norm()).collect();
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..k {
        for j in (i + 1)..k {
            let c = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let cos = (m.row(i).dot(&m.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                if absolute {
                    cos.abs()
                } else {
                    cos
                }
            };
            if best.is_none_or(|(_, _, b)| c > b) {
                best = Some((i, j, c));
            }
        }
    }
    best
}

/// `(kappa, mu)` of a memory.
pub fn diagnostics(memory: &PrototypeMemory) -> (f64, f64) {
    (memory.kappa(), memory.mu())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum L0Mode {
    #[default]
    Omp,
    Exact,
}

pub const EXACT_MAX_ATOMS: usize = 10;
pub const EXACT_MAX_SPARSITY: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct L0Fit {
    pub w: DVector<f64>,
    pub support: Vec<usize>,
    pub residual: f64,
}

fn sub_dictionary(atoms: &DMatrix<f64>, support: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(atoms.ncols(), support.len(), |i, j| atoms[(support[j], i)])
}

fn fit_on_support(u: &DVector<f64>, atoms: &DMatrix<f64>, support: &[usize]) -> (DVector<f64>, f64) {
    let (coef, resid) = least_squares(&sub_dictionary(atoms, support), u);
    let mut w = DVector::zeros(atoms.nrows());
    for (c, &j) in coef.iter().zip(support) {
        w[j] = *c;
    }
    (w, resid)
}

/// Sparse approximation `u ~ atoms^T w` with at most `r_sparse` nonzeros.
/// `atoms` is `K x r`, one atom per row.
pub fn l0_fit(u: &DVector<f64>, atoms: &DMatrix<f64>, r_sparse: usize, mode: L0Mode) -> Result<L0Fit> {
    let k = atoms.nrows();
    if atoms.ncols() != u.len() {
        return Err(CoreError::DimensionMismatch {
            what: "atom width",
            expected: u.len(),
            got: atoms.ncols(),
        });
    }
    if r_sparse == 0 || r_sparse > k.min(u.len()) {
        return Err(CoreError::InvalidConfig(format!(
            "sparsity {r_sparse} must lie in 1..={}",
            k.min(u.len())
        )));
    }
    ensure_finite("sparse-fit target", u.iter())?;
    let norms: Vec<f64> = (0..k).map(|i| atoms.row(i).norm()).collect();
    let top = norms.iter().copied().fold(0.0, f64::max);
    if let Some(j) = norms.iter().position(|&n| n <= 1e-14 * top || n == 0.0) {
        return Err(CoreError::Degenerate(format!("prototype atom {j} is zero")));
    }
    match mode {
        L0Mode::Omp => Ok(omp(u, atoms, &norms, r_sparse)),
        L0Mode::Exact => {
            if k > EXACT_MAX_ATOMS || r_sparse > EXACT_MAX_SPARSITY {
                return Err(CoreError::InvalidConfig(format!(
                    "exact mode supports K <= {EXACT_MAX_ATOMS} and sparsity <= {EXACT_MAX_SPARSITY}"
                )));
            }
            Ok(exact_l0(u, atoms, r_sparse))
        }
    }
}

fn omp(u: &DVector<f64>, atoms: &DMatrix<f64>, norms: &[f64], r_sparse: usize) -> L0Fit {
    let mut support: Vec<usize> = Vec::new();
    let mut w = DVector::zeros(atoms.nrows());
    let mut resid_vec = u.clone();
    let mut residual = u.norm();
    let floor = 1e-14 * u.norm();
    for _ in 0..r_sparse {
        let pick = (0..atoms.nrows())
            .filter(|j| !support.contains(j))
            .map(|j| (j, (atoms.row(j).transpose().dot(&resid_vec)).abs() / norms[j]))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        let Some((j, corr)) = pick else { break };
        if corr <= floor {
            break;
        }
        support.push(j);
        let (wn, rn) = fit_on_support(u, atoms, &support);
        w = wn;
        residual = rn;
        resid_vec = u - atoms.tr_mul(&w);
    }
    L0Fit { w, support, residual }
}

fn exact_l0(u: &DVector<f64>, atoms: &DMatrix<f64>, r_sparse: usize) -> L0Fit {
    let k = atoms.nrows();
    let mut best = L0Fit {
        w: DVector::zeros(k),
        support: Vec::new(),
        residual: u.norm(),
    };
    let mut idx: Vec<usize> = (0..r_sparse).collect();
    loop {
        let (w, resid) = fit_on_support(u, atoms, &idx);
        if resid < best.residual - 1e-15 * u.norm().max(1.0) {
            best = L0Fit {
                w,
                support: idx.clone(),
                residual: resid,
            };
        }
        // next combination in lexicographic order
        let mut i = r_sparse;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < k - r_sparse + i {
                idx[i] += 1;
                for t in (i + 1)..r_sparse {
                    idx[t] = idx[t - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Sparse-fit residuals of raw adapters against a memory, measured inside
/// the retained subspace.
pub fn coverage_residuals(memory: &PrototypeMemory, theta: &AdapterMatrix, r_sparse: usize, mode: L0Mode) -> Result<Vec<f64>> {
    let lifted = memory.lifted();
    (0..theta.n())
        .into_par_iter()
        .map(|i| {
            let u = memory.projection().project(&theta.row(i));
            l0_fit(&u, &lifted, r_sparse, mode).map(|f| f.residual)
        })
        .collect()
}

/// Median coverage residual over `theta_pre` with 90% percentile and BCa
/// intervals from task bootstrap. The percentile upper endpoint is stored on
/// the memory as the certified coverage error.
pub fn coverage_certificate(
    memory: &mut PrototypeMemory,
    theta_pre: &AdapterMatrix,
    r_sparse: usize,
    mode: L0Mode,
    resampler: &Resampler,
) -> Result<CoverageCertificate> {
    if !memory.is_frozen() {
        return Err(CoreError::NotFrozen("coverage certification"));
    }
    if theta_pre.n() == 0 {
        return Err(CoreError::Empty("pretraining adapters".into()));
    }
    let residuals = coverage_residuals(memory, theta_pre, r_sparse, mode)?;
    let cert = certificate_from_residuals(residuals, resampler)?;
    memory.certificate = Some(cert.clone());
    Ok(cert)
}

pub fn certificate_from_residuals(residuals: Vec<f64>, resampler: &Resampler) -> Result<CoverageCertificate> {
    let eps_hat = median(&residuals);
    let reps = bootstrap_replicates(residuals.len(), resampler, |idx| {
        median(&idx.iter().map(|&i| residuals[i]).collect::<Vec<_>>())
    })?;
    let pct90 = percentile_interval(&reps, COVERAGE_LEVEL)?;
    let jack = if residuals.len() > 1 {
        jackknife_values(residuals.len(), |idx| {
            median(&idx.iter().map(|&i| residuals[i]).collect::<Vec<_>>())
        })
    } else {
        vec![eps_hat]
    };
    let bca90 = bca_interval(&reps, eps_hat, &jack, COVERAGE_LEVEL)?;
    Ok(CoverageCertificate {
        eps_hat,
        pct90,
        bca90,
        n_boot: reps.len(),
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: DMatrix<f64>,
    pub assignment: Vec<usize>,
    pub sse: f64,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    (points.row(i) - centroids.row(c)).norm_squared()
}

fn nearest(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>) -> (usize, f64) {
    (0..centroids.nrows())
        .map(|c| (c, sq_dist(points, i, centroids, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus_init<R: Rng>(points: &DMatrix<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| (points.row(i) - points.row(chosen[0])).norm_squared())
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if acc > target && *v > 0.0 {
                    pick = i;
                    break;
                }
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|v| *v > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min((points.row(i) - points.row(next)).norm_squared());
        }
    }
    DMatrix::from_fn(k, points.ncols(), |c, j| points[(chosen[c], j)])
}

/// Lloyd iterations from a k-means++ start. Empty clusters are re-seeded
/// with the point farthest from its current centroid.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeansFit> {
    let n = points.nrows();
    if n == 0 {
        return Err(CoreError::Empty("clustering input".into()));
    }
    if k == 0 || k > n {
        return Err(CoreError::InvalidConfig(format!("K = {k} must lie in 1..={n}")));
    }
    ensure_finite("clustering input", points.iter())?;
    let mut rng = rng_from(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let next: Vec<usize> = (0..n).map(|i| nearest(points, i, &centroids).0).collect();
        let changed = next != assignment;
        assignment = next;
        let mut sums = DMatrix::zeros(k, points.ncols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += points.row(i);
            counts[c] += 1;
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).copy_from(&mean);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .map(|i| (i, sq_dist(points, i, &centroids, assignment[i])))
                    .fold(None, |best: Option<(usize, f64)>, cur| match best {
                        Some(b) if b.1 >= cur.1 => Some(b),
                        _ => Some(cur),
                    });
                if let Some((i, _)) = far {
                    counts[assignment[i]] -= 1;
                    assignment[i] = c;
                    counts[c] = 1;
                    centroids.row_mut(c).copy_from(&points.row(i));
                    reseeded = true;
                }
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    let sse = (0..n).map(|i| sq_dist(points, i, &centroids, assignment[i])).sum();
    Ok(KMeansFit {
        centroids,
        assignment,
        sse,
    })
}

fn choose2(x: usize) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index; two identical trivial partitions score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let ka = a.iter().copied().max().map_or(0, |m| m + 1);
    let kb = b.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let sum_ij: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = table.iter().map(|row| choose2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| choose2(table.iter().map(|row| row[j]).sum())).sum();
    let expected = if n > 1 { sum_a * sum_b / choose2(n) } else { 0.0 };
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / denom
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub restart_sse: Vec<f64>,
    pub best_restart: usize,
    pub sse: f64,
    /// Mean pairwise adjusted Rand index between restart assignments.
    pub stability: f64,
    pub assignment: Vec<usize>,
}

/// k-means over the canonical PCA coordinates of `theta` (raw adapters),
/// best of `n_restarts` by SSE. Centroids are lifted back to raw adapter
/// space through the projection.
pub fn cluster_prototypes(
    theta: &AdapterMatrix,
    projection: &Projection,
    k: usize,
    n_restarts: usize,
    seed: u64,
) -> Result<(PrototypeMemory, ClusterReport)> {
    if theta.n() == 0 {
        return Err(CoreError::Empty("seed adapters".into()));
    }
    if n_restarts == 0 {
        return Err(CoreError::InvalidConfig("n_restarts must be at least 1".into()));
    }
    if k > theta.n() {
        return Err(CoreError::InvalidConfig(format!(
            "K = {k} exceeds the {} seed adapters",
            theta.n()
        )));
    }
    let coords = projection.canonical_coords(theta);
    let fits = (0..n_restarts)
        .into_par_iter()
        .map(|i| kmeans(&coords, k, derive_seed(seed, "kmeans-restart", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let best_restart = (0..fits.len())
        .fold(0, |b, i| if fits[i].sse < fits[b].sse { i } else { b });
    let mut ari = Vec::new();
    for i in 0..fits.len() {
        for j in (i + 1)..fits.len() {
            ari.push(adjusted_rand_index(&fits[i].assignment, &fits[j].assignment));
        }
    }
    let stability = if ari.is_empty() { 1.0 } else { crate::stats::mean(&ari) };
    let best = &fits[best_restart];
    let mut rows = DMatrix::zeros(k, projection.d());
    for c in 0..k {
        let centroid = best.centroids.row(c).transpose();
        let lifted = projection.lift(&centroid) * projection.scale();
        rows.row_mut(c).copy_from(&lifted.transpose());
    }
    let memory = PrototypeMemory::new(rows, projection.clone())?;
    let report = ClusterReport {
        restart_sse: fits.iter().map(|f| f.sse).collect(),
        best_restart,
        sse: best.sse,
        stability,
        assignment: best.assignment.clone(),
    };
    Ok((memory, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub mu_threshold: f64,
    pub kappa_threshold: f64,
    /// Coherence-triggered merges only join positively aligned pairs, so an
    /// anti-parallel pair survives for nonnegative combinations. Merges
    /// triggered by conditioning still use the absolute cosine.
    #[serde(default)]
    pub sign_aware: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            mu_threshold: DEFAULT_MU_THRESHOLD,
            kappa_threshold: DEFAULT_KAPPA_THRESHOLD,
            sign_aware: false,
        }
    }
}

/// Merges the most coherent pair while coherence or conditioning exceed
/// their thresholds. The pair (lowest indices on ties) is replaced by the
/// mean of its unit directions, rescaled to the mean norm, at the lower
/// index. When `coverage` is given, each event records the median coverage
/// residual before and after.
pub fn merge_prototypes(
    memory: &mut PrototypeMemory,
    cfg: &MergeConfig,
    coverage: Option<(&AdapterMatrix, usize)>,
) -> Result<Vec<MergeEvent>> {
    if memory.is_frozen() {
        return Err(CoreError::Frozen);
    }
    let cov = |m: &PrototypeMemory| -> Result<Option<f64>> {
        match coverage {
            Some((theta, r_sparse)) => {
                let s = r_sparse.min(m.k()).min(m.r());
                Ok(Some(median(&coverage_residuals(m, theta, s, L0Mode::Omp)?)))
            }
            None => Ok(None),
        }
    };
    let mut events = Vec::new();
    loop {
        let pair = if cfg.sign_aware {
            match most_aligned_pair(memory.rows()) {
                Some(p) if p.2 > cfg.mu_threshold => Some(p),
                _ if memory.kappa() > cfg.kappa_threshold => most_coherent_pair(memory.rows()),
                _ => break,
            }
        } else if memory.mu() > cfg.mu_threshold || memory.kappa() > cfg.kappa_threshold {
            most_coherent_pair(memory.rows())
        } else {
            break;
        };
        let Some((i, j, c)) = pair else {
            return Err(CoreError::Degenerate(
                "diagnostics exceed thresholds with a single prototype".into(),
            ));
        };
        let before = cov(memory)?;
        let a = memory.row(i);
        let b = memory.row(j);
        let (na, nb) = (a.norm(), b.norm());
        let sign = if a.dot(&b) < 0.0 { -1.0 } else { 1.0 };
        let dir = match (na > 0.0, nb > 0.0) {
            (true, true) => &a / na + &b * (sign / nb),
            (true, false) => &a / na,
            (false, true) => &b / nb,
            (false, false) => a.clone(),
        };
        let merged = if dir.norm() > 0.0 {
            &dir / dir.norm() * (0.5 * (na + nb))
        } else {
            DVector::zeros(a.len())
        };
        let keep: Vec<usize> = (0..memory.k()).filter(|&t| t != j).collect();
        let mut rows = DMatrix::from_fn(keep.len(), memory.d(), |t, col| memory.rows[(keep[t], col)]);
        rows.row_mut(i).copy_from(&merged.transpose());
        memory.rows = rows;
        memory.refresh_diagnostics();
        let after = cov(memory)?;
        let event = MergeEvent {
            kept: i,
            removed: j,
            coherence: c,
            k_after: memory.k(),
            mu_after: memory.mu(),
            kappa_after: memory.kappa(),
            coverage_before: before,
            coverage_after: after,
        };
        memory.merge_log.push(event.clone());
        events.push(event);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_projection(d: usize) -> Projection {
        Projection::from_basis(DMatrix::identity(d, d), 1.0).unwrap()
    }

    #[test]
    fn orthonormal_rows_are_perfectly_conditioned() {
        let mem = PrototypeMemory::new(DMatrix::identity(3, 3), identity_projection(3)).unwrap();
        assert!((mem.kappa() - 1.0).abs() < 1e-12);
        assert_eq!(mem.mu(), 0.0);
    }

    #[test]
    fn duplicated_row_is_fully_coherent() {
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 0.0, 1.0]);
        assert!((mutual_coherence(&rows) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn omp_trivial_cases() {
        let atoms = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let u = DVector::from_vec(vec![0.0, 2.5, 0.0]);
        let fit = l0_fit(&u, &atoms, 1, L0Mode::Omp).unwrap();
        assert!((fit.w.clone() - DVector::from_vec(vec![0.0, 2.5])).amax() < 1e-12);
        assert!(fit.residual < 1e-12);
        let u = DVector::from_vec(vec![0.0, 0.0, 4.0]);
        let fit = l0_fit(&u, &atoms, 2, L0Mode::Omp).unwrap();
        assert_eq!(fit.w, DVector::zeros(2));
        assert!((fit.residual - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_atom_is_degenerate() {
        let atoms = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let u = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(l0_fit(&u, &atoms, 1, L0Mode::Omp), Err(CoreError::Degenerate(_))));
    }

    #[test]
    fn freeze_is_one_way() {
        let mut mem = PrototypeMemory::new(DMatrix::identity(2, 2), identity_projection(2)).unwrap();
        mem.freeze();
        assert_eq!(mem.replace_rows(DMatrix::identity(2, 2)), Err(CoreError::Frozen));
        assert_eq!(
            merge_prototypes(&mut mem, &MergeConfig::default(), None),
            Err(CoreError::Frozen)
        );
    }

    #[test]
    fn merge_examples() {
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        let mut mem = PrototypeMemory::new(rows.clone(), identity_projection(2)).unwrap();
        let cfg = MergeConfig {
            mu_threshold: 1.0,
            kappa_threshold: f64::INFINITY,
            sign_aware: false,
        };
        assert!(merge_prototypes(&mut mem, &cfg, None).unwrap().is_empty());
        let cfg = MergeConfig {
            mu_threshold: 0.99,
            kappa_threshold: f64::INFINITY,
            sign_aware: false,
        };
        let events = merge_prototypes(&mut mem, &cfg, None).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(mem.k(), 2);
        assert!((mem.row(0) - DVector::from_vec(vec![1.0, 1.0])).amax() < 1e-12);
    }

    #[test]
    fn sign_aware_merge_keeps_antiparallel_pair() {
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0]);
        let cfg = MergeConfig {
            sign_aware: true,
            ..MergeConfig::default()
        };
        let mut mem = PrototypeMemory::new(rows.clone(), identity_projection(2)).unwrap();
        assert!(merge_prototypes(&mut mem, &cfg, None).unwrap().is_empty());
        assert_eq!(mem.mu(), 1.0);
        let mut mem = PrototypeMemory::new(rows, identity_projection(2)).unwrap();
        assert_eq!(merge_prototypes(&mut mem, &MergeConfig::default(), None).unwrap().len(), 1);
    }

    #[test]
    fn ari_of_relabelled_partition_is_one() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]) - 1.0).abs() < 1e-12);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }

    #[test]
    fn one_cluster_per_point() {
        let pts = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 5.0, 5.0]);
        let fit = kmeans(&pts, 4, 3).unwrap();
        assert_eq!(fit.sse, 0.0);
    }
}
