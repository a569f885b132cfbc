//! Spectral diagnostics of the adapter population: PCA energy rank, empirical
//! Fisher spectra, the bootstrap Fisher energy-ratio test, random-projection
//! leakage checks and sequential paired-bootstrap rank selection.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterMatrix;
use crate::descriptors::ProbeHead;
use crate::linalg::{gaussian_matrix, sym_eigen_desc};
use crate::seeds::stream;
use crate::stats::{mean, percentile_interval, quantile_sorted, resample_indices, sample_std, sorted, Resampler};
use crate::synthdata::{EpisodeTask, FeatureMap};
use crate::{ensure_finite, CoreError, Result};

/// Energy level in the null hypothesis `zeta_r <= level`.
pub const H0_ENERGY_LEVEL: f64 = 0.95;
/// The energy test always corrects for five candidates `r-2..=r+2`, even
/// when some of them fall outside `1..=d` and are not evaluated.
pub const BONFERRONI_FAMILY: usize = 5;
pub const DEFAULT_DIM_ALPHA: f64 = 0.01;
pub const DEFAULT_N_BOOT: usize = 1000;

/// Uncentred PCA of row-stacked vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaFit {
    pub singular_values: Vec<f64>,
    /// Right singular vectors as columns, ordered like `singular_values`.
    pub components: DMatrix<f64>,
}

impl PcaFit {
    pub fn basis(&self, r: usize) -> DMatrix<f64> {
        self.components.columns(0, r).into_owned()
    }

    pub fn cumulative_energy(&self) -> Vec<f64> {
        cumulative_energy(&self.singular_values)
    }
}

pub fn pca(rows: &DMatrix<f64>) -> Result<PcaFit> {
    if rows.nrows() == 0 {
        return Err(CoreError::Empty("PCA input".into()));
    }
    ensure_finite("PCA input", rows.iter())?;
    let gram = rows.transpose() * rows;
    let (vals, vecs) = sym_eigen_desc(&gram);
    Ok(PcaFit {
        singular_values: vals.iter().map(|v| v.max(0.0).sqrt()).collect(),
        components: vecs,
    })
}

fn cumulative_energy(singular_values: &[f64]) -> Vec<f64> {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    singular_values
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect()
}

/// Smallest `r` whose leading squared singular values carry at least `rho`
/// of the total energy.
pub fn rank_from_singular_values(singular_values: &[f64], rho: f64) -> Result<usize> {
    if !(0.0 < rho && rho < 1.0) {
        return Err(CoreError::InvalidConfig("rho must lie in (0, 1)".into()));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if !(total > 0.0) {
        return Err(CoreError::Degenerate("all-zero spectrum".into()));
    }
    let cum = cumulative_energy(singular_values);
    Ok(cum.iter().position(|c| *c >= rho).map_or(cum.len(), |i| i + 1))
}

pub fn pca_rank(theta: &AdapterMatrix, rho: f64) -> Result<usize> {
    rank_from_singular_values(&pca(&theta.rows)?.singular_values, rho)
}

/// `(N, r(N))` using the first `N` rows for each requested size.
pub fn rank_curve(theta: &AdapterMatrix, sizes: &[usize], rho: f64) -> Result<Vec<(usize, usize)>> {
    sizes
        .iter()
        .map(|&n| {
            if n == 0 || n > theta.n() {
                return Err(CoreError::InvalidConfig(format!("curve size {n} out of range")));
            }
            let rows = theta.rows.rows(0, n).into_owned();
            Ok((n, rank_from_singular_values(&pca(&rows)?.singular_values, rho)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherSpectrum {
    /// Descending eigenvalues of the regularised Fisher matrix.
    pub eigenvalues: Vec<f64>,
    pub ridge_reg: f64,
    pub n_support: usize,
}

impl FisherSpectrum {
    /// Eigenvalues with the regulariser removed; values below
    /// `1e-12 * max` are set to zero.
    pub fn unregularized(&self) -> Vec<f64> {
        let raw: Vec<f64> = self.eigenvalues.iter().map(|v| (v - self.ridge_reg).max(0.0)).collect();
        let top = raw.iter().copied().fold(0.0, f64::max);
        raw.into_iter().map(|v| if v <= 1e-12 * top { 0.0 } else { v }).collect()
    }
}

/// `(1/n) sum g g^T` without regularisation.
pub fn fisher_matrix(gradients: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let first = gradients
        .first()
        .ok_or_else(|| CoreError::Empty("gradient set".into()))?;
    let d = first.len();
    ensure_finite("gradients", gradients.iter().flat_map(|g| g.iter()))?;
    let mut f = DMatrix::zeros(d, d);
    for g in gradients {
        if g.len() != d {
            return Err(CoreError::DimensionMismatch {
                what: "gradient",
                expected: d,
                got: g.len(),
            });
        }
        f.ger(1.0, g, g, 1.0);
    }
    Ok(f / gradients.len() as f64)
}

/// Default regulariser `1e-6 * trace / d`.
pub fn default_fisher_reg(fisher: &DMatrix<f64>) -> f64 {
    1e-6 * fisher.trace() / fisher.nrows().max(1) as f64
}

pub fn spectrum_of(fisher: &DMatrix<f64>, reg: f64, n_support: usize) -> FisherSpectrum {
    let d = fisher.nrows();
    let (vals, _) = sym_eigen_desc(&(fisher + DMatrix::identity(d, d) * reg));
    FisherSpectrum {
        eigenvalues: vals.iter().map(|v| v.max(0.0)).collect(),
        ridge_reg: reg,
        n_support,
    }
}

/// Spectrum of `(1/n) sum g g^T + reg I`; `reg = None` uses the trace-relative
/// default.
pub fn fisher_from_gradients(gradients: &[DVector<f64>], reg: Option<f64>) -> Result<FisherSpectrum> {
    let f = fisher_matrix(gradients)?;
    let reg = reg.unwrap_or_else(|| default_fisher_reg(&f));
    if !(reg >= 0.0) {
        return Err(CoreError::InvalidConfig("Fisher regulariser must be nonnegative".into()));
    }
    Ok(spectrum_of(&f, reg, gradients.len()))
}

/// Per-sample probe-loss gradients (with respect to the probe weights) over
/// the task's support set.
pub fn support_gradients(task: &EpisodeTask, probe: &ProbeHead, fmap: &FeatureMap) -> Result<Vec<DVector<f64>>> {
    if task.support.is_empty() {
        return Err(CoreError::Empty(format!("support of {}", task.task_id)));
    }
    Ok(task
        .support
        .iter()
        .map(|s| probe.sample_gradient(&fmap.apply(&s.x), s.y).0)
        .collect())
}

pub fn fisher_spectrum(task: &EpisodeTask, probe: &ProbeHead, fmap: &FeatureMap, reg: Option<f64>) -> Result<FisherSpectrum> {
    fisher_from_gradients(&support_gradients(task, probe, fmap)?, reg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimTestRecord {
    pub r_cand: usize,
    pub zeta_emp: f64,
    pub p_raw: f64,
    pub p_adj: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimTestReport {
    pub records: Vec<DimTestRecord>,
    pub selected_r: Option<usize>,
    pub alpha: f64,
    pub n_boot: usize,
    /// Human-readable notes on rows whose published decision disagrees with
    /// the adjusted-p rule.
    pub flags: Vec<String>,
}

pub fn bonferroni(p_raw: f64) -> f64 {
    (BONFERRONI_FAMILY as f64 * p_raw).min(1.0)
}

pub fn energy_ratio(eigenvalues: &[f64], r: usize) -> f64 {
    let total: f64 = eigenvalues.iter().sum();
    eigenvalues[..r.min(eigenvalues.len())].iter().sum::<f64>() / total
}

/// Candidate family `r-2..=r+2` clipped to `1..=d`.
pub fn candidate_dims(r_center: usize, d: usize) -> Vec<usize> {
    let lo = r_center.saturating_sub(2).max(1);
    let hi = (r_center + 2).min(d);
    (lo..=hi).collect()
}

fn finish_report(records: Vec<DimTestRecord>, alpha: f64, n_boot: usize) -> DimTestReport {
    let selected_r = records.iter().filter(|r| r.reject).map(|r| r.r_cand).min();
    DimTestReport {
        records,
        selected_r,
        alpha,
        n_boot,
        flags: Vec::new(),
    }
}

/// Bootstrap test of `H0: zeta_r <= level` for each candidate.
///
/// A resample draws `d` eigenvalue positions with replacement. Each drawn
/// value keeps its original rank, so the resampled ratio is the mass drawn
/// from the top `r` positions over the total drawn mass. Resamples with zero
/// total mass carry no ratio; they are redrawn in random mode and skipped in
/// exhaustive mode. `p_raw = (1 + #{zeta* <= level}) / (B + 1)` over the `B`
/// usable resamples, shared by all candidates.
pub fn energy_test_on_values(
    eigenvalues: &[f64],
    r_center: usize,
    resampler: &Resampler,
    alpha: f64,
    level: f64,
) -> Result<DimTestReport> {
    let d = eigenvalues.len();
    if d == 0 {
        return Err(CoreError::Empty("eigenvalue vector".into()));
    }
    ensure_finite("eigenvalues", eigenvalues.iter())?;
    if eigenvalues.iter().any(|v| *v < 0.0) {
        return Err(CoreError::InvalidConfig("eigenvalues must be nonnegative".into()));
    }
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(CoreError::Degenerate("Fisher spectrum has zero energy".into()));
    }
    if let Resampler::Random { n_boot, .. } = resampler {
        if *n_boot == 0 {
            return Err(CoreError::InvalidConfig("n_boot must be positive".into()));
        }
    }
    let candidates = candidate_dims(r_center, d);
    if candidates.is_empty() {
        return Err(CoreError::InvalidConfig("no valid candidate dimensions".into()));
    }

    let draws: Vec<Vec<usize>> = match *resampler {
        Resampler::Exhaustive => resample_indices(d, d, resampler)?
            .into_iter()
            .filter(|idx| idx.iter().map(|&i| eigenvalues[i]).sum::<f64>() > 0.0)
            .collect(),
        Resampler::Random { n_boot, seed } => {
            use rand::Rng;
            let mut rng = crate::seeds::rng_from(seed);
            let mut out = Vec::with_capacity(n_boot);
            while out.len() < n_boot {
                let idx: Vec<usize> = (0..d).map(|_| rng.random_range(0..d)).collect();
                if idx.iter().map(|&i| eigenvalues[i]).sum::<f64>() > 0.0 {
                    out.push(idx);
                }
            }
            out
        }
    };
    let b = draws.len();
    let records = candidates
        .iter()
        .map(|&r| {
            let below = draws
                .par_iter()
                .filter(|idx| {
                    let mass: f64 = idx.iter().map(|&i| eigenvalues[i]).sum();
                    let top: f64 = idx.iter().filter(|&&i| i < r).map(|&i| eigenvalues[i]).sum();
                    top / mass <= level
                })
                .count();
            let p_raw = (1 + below) as f64 / (b + 1) as f64;
            let p_adj = bonferroni(p_raw);
            DimTestRecord {
                r_cand: r,
                zeta_emp: energy_ratio(eigenvalues, r),
                p_raw,
                p_adj,
                reject: p_adj <= alpha,
            }
        })
        .collect();
    Ok(finish_report(records, alpha, b))
}

/// Energy test on the regulariser-free spectrum.
pub fn fisher_energy_test(spectrum: &FisherSpectrum, r_center: usize, resampler: &Resampler, alpha: f64) -> Result<DimTestReport> {
    energy_test_on_values(&spectrum.unregularized(), r_center, resampler, alpha, H0_ENERGY_LEVEL)
}

/// A published row of the energy test: candidate, observed ratio, raw p-value
/// and the decision printed alongside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishedDimRow {
    pub r_cand: usize,
    pub zeta_emp: f64,
    pub p_raw: f64,
    pub published_reject: Option<bool>,
}

/// Re-derives adjusted p-values and decisions from published raw p-values,
/// flagging rows whose printed decision contradicts `p_adj <= alpha`.
pub fn decide_from_published(rows: &[PublishedDimRow], alpha: f64, n_boot: usize) -> DimTestReport {
    let mut flags = Vec::new();
    let records = rows
        .iter()
        .map(|row| {
            let p_adj = bonferroni(row.p_raw);
            let reject = p_adj <= alpha + 1e-12;
            if let Some(published) = row.published_reject {
                if published != reject {
                    flags.push(format!(
                        "r={}: published decision {} but p_adj={:.3} {} alpha={}",
                        row.r_cand,
                        if published { "reject" } else { "keep" },
                        p_adj,
                        if reject { "<=" } else { ">" },
                        alpha
                    ));
                }
            }
            DimTestRecord {
                r_cand: row.r_cand,
                zeta_emp: row.zeta_emp,
                p_raw: row.p_raw,
                p_adj,
                reject,
            }
        })
        .collect();
    let mut report = finish_report(records, alpha, n_boot);
    report.flags = flags;
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherBand {
    pub n_support: usize,
    /// 0-based rank of the eigenvalue.
    pub eigen_index: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherBandTable {
    pub bands: Vec<FisherBand>,
    /// Whether band widths never grow with the support size, per eigenvalue.
    pub widths_shrink: Vec<bool>,
}

/// Percentile bands of the leading Fisher eigenvalues across support
/// subsamples drawn with replacement from the available gradients.
pub fn fisher_ci_vs_support(
    gradients: &[DVector<f64>],
    support_sizes: &[usize],
    n_leading: usize,
    resampler: &Resampler,
    percentiles: (f64, f64),
    reg: f64,
) -> Result<FisherBandTable> {
    let n_avail = gradients.len();
    if n_avail == 0 {
        return Err(CoreError::Empty("gradient pool".into()));
    }
    let d = gradients[0].len();
    let n_leading = n_leading.min(d);
    let mut bands = Vec::new();
    for (si, &n_s) in support_sizes.iter().enumerate() {
        if n_s < 2 {
            return Err(CoreError::InvalidConfig("support sizes must be at least 2".into()));
        }
        if n_s > n_avail {
            return Err(CoreError::InvalidConfig(format!(
                "support size {n_s} exceeds the {n_avail} available samples"
            )));
        }
        let resampler = match *resampler {
            Resampler::Random { n_boot, seed } => Resampler::random(n_boot, crate::seeds::derive_seed(seed, "fisher-band", si as u64)),
            Resampler::Exhaustive => Resampler::Exhaustive,
        };
        let draws = resample_indices(n_avail, n_s, &resampler)?;
        let leading: Vec<Vec<f64>> = draws
            .par_iter()
            .map(|idx| {
                let sub: Vec<DVector<f64>> = idx.iter().map(|&i| gradients[i].clone()).collect();
                let spec = spectrum_of(&fisher_matrix(&sub).expect("non-empty"), reg, n_s);
                spec.eigenvalues[..n_leading].to_vec()
            })
            .collect();
        for k in 0..n_leading {
            let column = sorted(&leading.iter().map(|v| v[k]).collect::<Vec<_>>());
            bands.push(FisherBand {
                n_support: n_s,
                eigen_index: k,
                lo: quantile_sorted(&column, percentiles.0 / 100.0),
                hi: quantile_sorted(&column, percentiles.1 / 100.0),
            });
        }
    }
    let widths_shrink = (0..n_leading)
        .map(|k| {
            let widths: Vec<f64> = bands
                .iter()
                .filter(|b| b.eigen_index == k)
                .map(|b| b.hi - b.lo)
                .collect();
            widths.windows(2).all(|w| w[1] <= w[0] + 1e-15)
        })
        .collect();
    Ok(FisherBandTable { bands, widths_shrink })
}

/// Fraction of `tr(F)` outside the span of the orthonormal columns of `basis`.
pub fn outside_energy_fraction(fisher: &DMatrix<f64>, basis: &DMatrix<f64>) -> f64 {
    let total = fisher.trace();
    if total <= 0.0 {
        return 0.0;
    }
    let inside = (basis.transpose() * fisher * basis).trace();
    (1.0 - inside / total).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlConfig {
    pub target_dim: usize,
    pub n_maps: usize,
    pub n_boot: usize,
    pub seed: u64,
    /// Acceptance threshold on the upper bound, within `[0.01, 0.05]`.
    pub threshold: f64,
}

impl Default for JlConfig {
    fn default() -> Self {
        Self {
            target_dim: 4,
            n_maps: 50,
            n_boot: DEFAULT_N_BOOT,
            seed: 0,
            threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlReport {
    pub per_map: Vec<f64>,
    pub mean_fraction: f64,
    /// Bootstrap 95th percentile of the mean fraction over maps.
    pub upper_bound: f64,
    pub threshold: f64,
    pub accepted: bool,
}

pub fn accept_leakage(upper_bound: f64, threshold: f64) -> bool {
    upper_bound <= threshold
}

/// Outside-subspace Fisher energy after Gaussian random projections.
///
/// Each map `R: R^d -> R^s` has `N(0, 1/s)` entries. Held-out adapters are
/// projected, their top-`r` uncentred principal directions in `R^s` are
/// computed, and the fraction of `tr(R F R^T)` outside that span is recorded.
pub fn jl_outside_energy(theta_holdout: &DMatrix<f64>, fisher: &DMatrix<f64>, r: usize, cfg: &JlConfig) -> Result<JlReport> {
    let d = theta_holdout.ncols();
    let s = cfg.target_dim;
    if fisher.nrows() != d || fisher.ncols() != d {
        return Err(CoreError::DimensionMismatch {
            what: "Fisher form",
            expected: d,
            got: fisher.nrows(),
        });
    }
    if s <= r {
        return Err(CoreError::InvalidConfig(format!(
            "target dimension {s} must exceed r = {r}"
        )));
    }
    if s >= d {
        return Err(CoreError::InvalidConfig(format!(
            "target dimension {s} must be below d = {d}"
        )));
    }
    if cfg.n_maps == 0 {
        return Err(CoreError::InvalidConfig("n_maps must be positive".into()));
    }
    if !(0.01..=0.05).contains(&cfg.threshold) {
        return Err(CoreError::InvalidConfig("threshold must lie in [0.01, 0.05]".into()));
    }
    let per_map: Vec<f64> = (0..cfg.n_maps)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(cfg.seed, "jl-map", m as u64);
            let proj = gaussian_matrix(s, d, &mut rng) / (s as f64).sqrt();
            let projected = theta_holdout * proj.transpose();
            let basis = pca(&projected).map(|p| p.basis(r));
            let pf = &proj * fisher * proj.transpose();
            basis.map(|b| outside_energy_fraction(&pf, &b)).unwrap_or(1.0)
        })
        .collect();
    let resampler = Resampler::random(cfg.n_boot, crate::seeds::derive_seed(cfg.seed, "jl-boot", 0));
    let boot_means = crate::stats::bootstrap_replicates(per_map.len(), &resampler, |idx| {
        idx.iter().map(|&i| per_map[i]).sum::<f64>() / idx.len() as f64
    })?;
    let upper_bound = quantile_sorted(&sorted(&boot_means), 0.95);
    Ok(JlReport {
        mean_fraction: mean(&per_map),
        accepted: accept_leakage(upper_bound, cfg.threshold),
        per_map,
        upper_bound,
        threshold: cfg.threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialStep {
    pub r: usize,
    pub mean_improvement: f64,
    pub t_obs: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialReport {
    pub steps: Vec<SequentialStep>,
    pub selected_r: usize,
}

pub const SEQUENTIAL_ALPHA: f64 = 0.05;

/// Per-task squared reconstruction error after projecting on the top-`r`
/// uncentred principal directions of `rows`.
pub fn reconstruction_errors(rows: &DMatrix<f64>, fit: &PcaFit, r: usize) -> Vec<f64> {
    let basis = fit.basis(r);
    (0..rows.nrows())
        .map(|i| {
            let x = rows.row(i).transpose();
            (&x - &basis * (basis.transpose() * &x)).norm_squared()
        })
        .collect()
}

/// One-sided paired bootstrap-t p-value for `mean(diffs) > 0`.
///
/// Bootstrap statistics are centred at the observed mean. Differences that
/// are all below `zero_tol` in magnitude give `p = 1`; a positive mean with
/// zero spread gives the smallest attainable p-value `1 / (B + 1)`.
pub fn paired_bootstrap_p(diffs: &[f64], resampler: &Resampler, zero_tol: f64) -> Result<(f64, f64)> {
    let n = diffs.len();
    let m = mean(diffs);
    if diffs.iter().all(|d| d.abs() <= zero_tol) {
        return Ok((0.0, 1.0));
    }
    let sd = sample_std(diffs);
    let draws = resample_indices(n, n, resampler)?;
    let b = draws.len();
    if sd <= zero_tol {
        let p = if m > 0.0 { 1.0 / (b + 1) as f64 } else { 1.0 };
        return Ok((if m > 0.0 { f64::INFINITY } else { 0.0 }, p));
    }
    let se = sd / (n as f64).sqrt();
    let t_obs = m / se;
    let exceed = draws
        .iter()
        .filter(|idx| {
            let sample: Vec<f64> = idx.iter().map(|&i| diffs[i]).collect();
            let ms = mean(&sample);
            let ss = sample_std(&sample);
            let t = if ss <= zero_tol {
                if (ms - m).abs() <= zero_tol {
                    0.0
                } else {
                    (ms - m).signum() * f64::INFINITY
                }
            } else {
                (ms - m) / (ss / (n as f64).sqrt())
            };
            t >= t_obs
        })
        .count();
    Ok((t_obs, (1 + exceed) as f64 / (b + 1) as f64))
}

/// Walks the candidates `r-2..=r+2` upwards and stops at the first `r` whose
/// improvement from adding dimension `r+1` is not significant at 0.05; if
/// every step is significant the dimension after the last candidate is
/// returned. Candidate `k` uses bootstrap stream `derive_seed(seed, "seq-r", k)`.
pub fn sequential_r_selection(theta: &AdapterMatrix, r_center: usize, n_boot: usize, seed: u64) -> Result<SequentialReport> {
    sequential_r_selection_with(theta, r_center, |k| {
        Resampler::random(n_boot, crate::seeds::derive_seed(seed, "seq-r", k as u64))
    })
}

pub fn sequential_r_selection_with<F>(theta: &AdapterMatrix, r_center: usize, resampler_for: F) -> Result<SequentialReport>
where
    F: Fn(usize) -> Resampler,
{
    if theta.n() < 3 {
        return Err(CoreError::InvalidConfig("sequential selection needs at least 3 tasks".into()));
    }
    let d = theta.d_theta();
    if d < 2 {
        return Err(CoreError::InvalidConfig("need at least two dimensions".into()));
    }
    let candidates: Vec<usize> = candidate_dims(r_center, d - 1);
    if candidates.is_empty() {
        return Err(CoreError::InvalidConfig("no valid candidates".into()));
    }
    let fit = pca(&theta.rows)?;
    let scale = theta.rows.iter().map(|v| v * v).sum::<f64>() / theta.n() as f64;
    let zero_tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut steps = Vec::new();
    for (k, &r) in candidates.iter().enumerate() {
        let before = reconstruction_errors(&theta.rows, &fit, r);
        let after = reconstruction_errors(&theta.rows, &fit, r + 1);
        let diffs: Vec<f64> = before.iter().zip(&after).map(|(a, b)| a - b).collect();
        let (t_obs, p) = paired_bootstrap_p(&diffs, &resampler_for(k), zero_tol)?;
        let significant = p < SEQUENTIAL_ALPHA;
        steps.push(SequentialStep {
            r,
            mean_improvement: mean(&diffs),
            t_obs,
            p_value: p,
            significant,
        });
        if !significant {
            return Ok(SequentialReport { steps, selected_r: r });
        }
    }
    let last = *candidates.last().expect("non-empty");
    Ok(SequentialReport {
        steps,
        selected_r: (last + 1).min(d),
    })
}

/// Percentile interval of a per-map or per-task statistic; thin wrapper for
/// report code.
pub fn band(values: &[f64], level: f64) -> Result<crate::stats::Interval> {
    percentile_interval(values, level)
}
