//! Fixed-length task descriptors: pooled support moments, per-coordinate
//! percentiles, the projected gradient of a fixed probe head and, for small
//! supports, bootstrap variances of the pooled mean.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seeds::{derive_seed, rng_from};
use crate::stats::{quantile_sorted, resample_indices, sorted, Resampler};
use crate::synthdata::{sigmoid, EpisodeTask, FeatureMap, Partition, Sample};
use crate::{ensure_finite, CoreError, Result};

pub const DEFAULT_PERCENTILES: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 90.0];
pub const DEFAULT_SMALL_SUPPORT: usize = 5;
pub const DEFAULT_BOOT_RESAMPLES: usize = 200;
pub const DEFAULT_CLIP: f64 = 10.0;

/// Logistic classifier `sigma(w . phi + b)` on adapter features with fixed
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    weights: DVector<f64>,
    bias: f64,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGradient {
    pub loss: f64,
    pub grad_weights: DVector<f64>,
    pub grad_bias: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl ProbeHead {
    /// Weights drawn `N(0, 1/d)`, bias zero.
    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, "probe-head", 0));
        let normal = Normal::new(0.0, 1.0 / (d.max(1) as f64).sqrt()).expect("valid std");
        Self {
            weights: DVector::from_fn(d, |_, _| normal.sample(&mut rng)),
            bias: 0.0,
            seed,
        }
    }

    pub fn from_params(weights: DVector<f64>, bias: f64) -> Result<Self> {
        ensure_finite("probe parameters", weights.iter().chain(std::iter::once(&bias)))?;
        Ok(Self { weights, bias, seed: 0 })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, phi: &DVector<f64>) -> f64 {
        self.weights.dot(phi) + self.bias
    }

    /// Cross-entropy of one sample.
    pub fn sample_loss(&self, phi: &DVector<f64>, y: u8) -> f64 {
        let z = self.logit(phi);
        softplus(z) - f64::from(y) * z
    }

    /// Gradient of the per-sample loss: `(p - y) phi` for the weights and
    /// `p - y` for the bias.
    pub fn sample_gradient(&self, phi: &DVector<f64>, y: u8) -> (DVector<f64>, f64) {
        let resid = sigmoid(self.logit(phi)) - f64::from(y);
        (phi * resid, resid)
    }

    pub fn loss_and_gradient(&self, features: &[DVector<f64>], labels: &[u8]) -> Result<ProbeGradient> {
        if features.is_empty() {
            return Err(CoreError::Empty("probe support".into()));
        }
        if features.len() != labels.len() {
            return Err(CoreError::DimensionMismatch {
                what: "probe labels",
                expected: features.len(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(CoreError::InvalidConfig("probe labels must be 0 or 1".into()));
        }
        ensure_finite("probe inputs", features.iter().flat_map(|f| f.iter()))?;
        let n = features.len() as f64;
        let mut loss = 0.0;
        let mut gw = DVector::zeros(self.dim());
        let mut gb = 0.0;
        for (phi, &y) in features.iter().zip(labels) {
            if phi.len() != self.dim() {
                return Err(CoreError::DimensionMismatch {
                    what: "probe input",
                    expected: self.dim(),
                    got: phi.len(),
                });
            }
            loss += self.sample_loss(phi, y);
            let (w, b) = self.sample_gradient(phi, y);
            gw += w;
            gb += b;
        }
        Ok(ProbeGradient {
            loss: loss / n,
            grad_weights: gw / n,
            grad_bias: gb / n,
        })
    }
}

pub fn probe_gradient(probe: &ProbeHead, support: &[Sample], fmap: &FeatureMap) -> Result<ProbeGradient> {
    let features: Vec<DVector<f64>> = support.iter().map(|s| fmap.apply(&s.x)).collect();
    let labels: Vec<u8> = support.iter().map(|s| s.y).collect();
    probe.loss_and_gradient(&features, &labels)
}

/// Mean and population standard deviation per coordinate.
pub fn pooled_moments(embeddings: &[DVector<f64>]) -> Result<(DVector<f64>, DVector<f64>)> {
    let first = embeddings
        .first()
        .ok_or_else(|| CoreError::Empty("support embeddings".into()))?;
    ensure_finite("support embeddings", embeddings.iter().flat_map(|e| e.iter()))?;
    let n = embeddings.len() as f64;
    let mut mu = DVector::zeros(first.len());
    for e in embeddings {
        mu += e;
    }
    mu /= n;
    let mut var = DVector::zeros(first.len());
    for e in embeddings {
        let c = e - &mu;
        var += c.component_mul(&c);
    }
    Ok((mu, (var / n).map(f64::sqrt)))
}

/// Percentiles of each coordinate, laid out coordinate-major.
pub fn order_statistics(embeddings: &[DVector<f64>], percentiles: &[f64]) -> DVector<f64> {
    let q = embeddings[0].len();
    let mut out = Vec::with_capacity(q * percentiles.len());
    for j in 0..q {
        let col = sorted(&embeddings.iter().map(|e| e[j]).collect::<Vec<_>>());
        out.extend(percentiles.iter().map(|p| quantile_sorted(&col, p / 100.0)));
    }
    DVector::from_vec(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub percentiles: Vec<f64>,
    /// Supports smaller than this get the bootstrap-variance block.
    pub small_support_cutoff: usize,
    pub boot_resamples: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            small_support_cutoff: DEFAULT_SMALL_SUPPORT,
            boot_resamples: DEFAULT_BOOT_RESAMPLES,
            clip: DEFAULT_CLIP,
            seed: 0,
        }
    }
}

/// Descriptor blocks before standardisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDescriptor {
    pub mu: DVector<f64>,
    pub sigma: DVector<f64>,
    pub order_stats: DVector<f64>,
    pub g_proj: DVector<f64>,
    pub boot_var: Option<DVector<f64>>,
    pub probe_loss: f64,
}

impl RawDescriptor {
    pub fn to_vector(&self) -> DVector<f64> {
        concat(&self.mu, &self.sigma, &self.order_stats, &self.g_proj, self.boot_var.as_ref())
    }
}

fn concat(
    mu: &DVector<f64>,
    sigma: &DVector<f64>,
    order: &DVector<f64>,
    g: &DVector<f64>,
    boot: Option<&DVector<f64>>,
) -> DVector<f64> {
    let mut v: Vec<f64> = mu.iter().chain(sigma.iter()).chain(order.iter()).chain(g.iter()).copied().collect();
    if let Some(b) = boot {
        v.extend(b.iter());
    }
    DVector::from_vec(v)
}

fn canonical_order(support: &[Sample]) -> Vec<&Sample> {
    let mut out: Vec<&Sample> = support.iter().collect();
    out.sort_by(|a, b| {
        a.x.iter()
            .zip(b.x.iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.y.cmp(&b.y))
    });
    out
}

/// Variance across resamples of the bootstrap mean, per coordinate. Samples
/// are put in a canonical order first so the result does not depend on the
/// order the support was listed in.
fn bootstrap_mean_variance(support: &[Sample], n_boot: usize, seed: u64) -> Result<DVector<f64>> {
    let ordered = canonical_order(support);
    let draws = resample_indices(ordered.len(), ordered.len(), &Resampler::random(n_boot, seed))?;
    let q = ordered[0].x.len();
    let means: Vec<DVector<f64>> = draws
        .iter()
        .map(|idx| {
            let mut m = DVector::zeros(q);
            for &i in idx {
                m += &ordered[i].x;
            }
            m / idx.len() as f64
        })
        .collect();
    let (_, sd) = pooled_moments(&means)?;
    Ok(sd.component_mul(&sd))
}

/// Unstandardised descriptor of a support set. `basis` is the `d x r`
/// orthonormal projection applied to the probe gradient.
pub fn raw_descriptor(
    support: &[Sample],
    probe: &ProbeHead,
    fmap: &FeatureMap,
    basis: &DMatrix<f64>,
    cfg: &DescriptorConfig,
) -> Result<RawDescriptor> {
    if support.is_empty() {
        return Err(CoreError::Empty("support set".into()));
    }
    if basis.nrows() != probe.dim() {
        return Err(CoreError::DimensionMismatch {
            what: "projection basis",
            expected: probe.dim(),
            got: basis.nrows(),
        });
    }
    let embeddings: Vec<DVector<f64>> = support.iter().map(|s| s.x.clone()).collect();
    let (mu, sigma) = pooled_moments(&embeddings)?;
    let order_stats = order_statistics(&embeddings, &cfg.percentiles);
    let grad = probe_gradient(probe, support, fmap)?;
    let g_proj = basis.transpose() * &grad.grad_weights;
    let boot_var = if support.len() < cfg.small_support_cutoff {
        Some(bootstrap_mean_variance(support, cfg.boot_resamples, derive_seed(cfg.seed, "boot-var", 0))?)
    } else {
        None
    };
    Ok(RawDescriptor {
        mu,
        sigma,
        order_stats,
        g_proj,
        boot_var,
        probe_loss: grad.loss,
    })
}

/// Per-entry z-scoring fitted on pretraining tasks, followed by clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
    pub clip: f64,
    pub n_fit: usize,
}

fn check_pretraining(task_id: &str, partition: Option<Partition>) -> Result<()> {
    match partition {
        Some(p) if p.is_pretraining() => Ok(()),
        Some(p) => Err(CoreError::Leakage(format!(
            "standardizer fitted on {task_id} from partition {}",
            p.as_str()
        ))),
        None => Err(CoreError::Leakage(format!(
            "standardizer fitted on {task_id}, which has no partition"
        ))),
    }
}

impl Standardizer {
    /// Computes raw descriptors of the given tasks and fits on them. Every
    /// task must carry a pretraining partition.
    pub fn fit(
        tasks: &[&EpisodeTask],
        probe: &ProbeHead,
        fmap: &FeatureMap,
        basis: &DMatrix<f64>,
        cfg: &DescriptorConfig,
    ) -> Result<Self> {
        for t in tasks {
            check_pretraining(&t.task_id, t.partition())?;
        }
        let raws = tasks
            .iter()
            .map(|t| raw_descriptor(&t.support, probe, fmap, basis, cfg).map(|r| r.to_vector()))
            .collect::<Result<Vec<_>>>()?;
        let tagged: Vec<(&str, Option<Partition>, DVector<f64>)> = tasks
            .iter()
            .zip(raws)
            .map(|(t, r)| (t.task_id.as_str(), t.partition(), r))
            .collect();
        Self::fit_raw(&tagged, cfg.clip)
    }

    pub fn fit_raw(tagged: &[(&str, Option<Partition>, DVector<f64>)], clip: f64) -> Result<Self> {
        for (id, p, _) in tagged {
            check_pretraining(id, *p)?;
        }
        let first = tagged
            .first()
            .ok_or_else(|| CoreError::Empty("standardizer fit set".into()))?;
        if !(clip > 0.0) {
            return Err(CoreError::InvalidConfig("clip must be positive".into()));
        }
        let d = first.2.len();
        let rows: Vec<DVector<f64>> = tagged
            .iter()
            .map(|(_, _, v)| {
                if v.len() == d {
                    Ok(v.clone())
                } else {
                    Err(CoreError::DimensionMismatch {
                        what: "descriptor length",
                        expected: d,
                        got: v.len(),
                    })
                }
            })
            .collect::<Result<_>>()?;
        let (mean, sd) = pooled_moments(&rows)?;
        let scale = sd.map(|s| if s > 1e-12 { s } else { 1.0 });
        Ok(Self {
            mean,
            scale,
            clip,
            n_fit: rows.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, raw: &DVector<f64>) -> Result<DVector<f64>> {
        if raw.len() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                what: "descriptor length",
                expected: self.dim(),
                got: raw.len(),
            });
        }
        ensure_finite("descriptor", raw.iter())?;
        Ok(DVector::from_fn(raw.len(), |i, _| {
            ((raw[i] - self.mean[i]) / self.scale[i]).clamp(-self.clip, self.clip)
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_id: String,
    pub mu_std: DVector<f64>,
    pub sigma_std: DVector<f64>,
    pub order_stats: DVector<f64>,
    pub g_proj: DVector<f64>,
    pub boot_var: Option<DVector<f64>>,
}

impl TaskDescriptor {
    pub fn d_z(&self) -> usize {
        self.mu_std.len()
            + self.sigma_std.len()
            + self.order_stats.len()
            + self.g_proj.len()
            + self.boot_var.as_ref().map_or(0, |b| b.len())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        concat(&self.mu_std, &self.sigma_std, &self.order_stats, &self.g_proj, self.boot_var.as_ref())
    }
}

pub fn build_descriptor(
    task: &EpisodeTask,
    probe: &ProbeHead,
    fmap: &FeatureMap,
    basis: &DMatrix<f64>,
    standardizer: &Standardizer,
    cfg: &DescriptorConfig,
) -> Result<TaskDescriptor> {
    let raw = raw_descriptor(&task.support, probe, fmap, basis, cfg)?;
    let z = standardizer.transform(&raw.to_vector())?;
    let mut offset = 0;
    let mut take = |n: usize| {
        let block = z.rows(offset, n).into_owned();
        offset += n;
        block
    };
    let mu_std = take(raw.mu.len());
    let sigma_std = take(raw.sigma.len());
    let order_stats = take(raw.order_stats.len());
    let g_proj = take(raw.g_proj.len());
    let boot_var = raw.boot_var.as_ref().map(|b| take(b.len()));
    Ok(TaskDescriptor {
        task_id: task.task_id.clone(),
        mu_std,
        sigma_std,
        order_stats,
        g_proj,
        boot_var,
    })
}
