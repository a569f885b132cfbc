//! Per-task ridge adapters, the row-stacked adapter matrix, and the global
//! canonicalization applied before PCA and clustering.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::sym_eigen_desc;
use crate::synthdata::{EpisodeTask, FeatureMap, Sample};
use crate::{ensure_finite, CoreError, Result};

pub const DEFAULT_RIDGE_ALPHA: f64 = 1e-2;

/// Minimiser of `||X theta - y||^2 + alpha ||theta||^2`.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(CoreError::InvalidConfig("ridge alpha must be positive".into()));
    }
    if x.nrows() == 0 {
        return Err(CoreError::Empty("ridge design".into()));
    }
    if x.nrows() != y.len() {
        return Err(CoreError::DimensionMismatch {
            what: "ridge targets",
            expected: x.nrows(),
            got: y.len(),
        });
    }
    ensure_finite("ridge design", x.iter().chain(y.iter()))?;
    let d = x.ncols();
    let gram = x.transpose() * x + DMatrix::identity(d, d) * alpha;
    let rhs = x.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| CoreError::Degenerate("ridge normal equations".into()))?;
    Ok(chol.solve(&rhs))
}

/// Labels as ridge targets: 1 -> +1, 0 -> -1.
pub fn signed_targets(samples: &[Sample]) -> DVector<f64> {
    DVector::from_iterator(
        samples.len(),
        samples.iter().map(|s| if s.y == 1 { 1.0 } else { -1.0 }),
    )
}

pub fn ridge_on_samples(samples: &[Sample], fmap: &FeatureMap, alpha: f64) -> Result<DVector<f64>> {
    ridge_fit(&fmap.features(samples), &signed_targets(samples), alpha)
}

/// Ridge adapter fitted on the task's support set.
pub fn ridge_adapter(task: &EpisodeTask, fmap: &FeatureMap, alpha: f64) -> Result<DVector<f64>> {
    if task.support.is_empty() {
        return Err(CoreError::Empty(format!("support of {}", task.task_id)));
    }
    ridge_on_samples(&task.support, fmap, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMatrix {
    pub rows: DMatrix<f64>,
    pub task_ids: Vec<String>,
    pub ridge_alpha: f64,
    pub canonicalized: bool,
}

impl AdapterMatrix {
    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d_theta(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }

    pub fn row_vectors(&self) -> Vec<DVector<f64>> {
        (0..self.n()).map(|i| self.row(i)).collect()
    }

    /// Rows restricted to the given indices, order preserved.
    pub fn select(&self, indices: &[usize]) -> AdapterMatrix {
        let rows = DMatrix::from_fn(indices.len(), self.d_theta(), |i, j| self.rows[(indices[i], j)]);
        AdapterMatrix {
            rows,
            task_ids: indices.iter().map(|&i| self.task_ids[i].clone()).collect(),
            ridge_alpha: self.ridge_alpha,
            canonicalized: self.canonicalized,
        }
    }
}

/// Stacks adapters row-wise in the given order.
pub fn assemble_theta(adapters: &[DVector<f64>], task_ids: &[String], ridge_alpha: f64) -> Result<AdapterMatrix> {
    let first = adapters
        .first()
        .ok_or_else(|| CoreError::Empty("adapter list".into()))?;
    if task_ids.len() != adapters.len() {
        return Err(CoreError::DimensionMismatch {
            what: "task ids",
            expected: adapters.len(),
            got: task_ids.len(),
        });
    }
    let d = first.len();
    for a in adapters {
        if a.len() != d {
            return Err(CoreError::DimensionMismatch {
                what: "adapter length",
                expected: d,
                got: a.len(),
            });
        }
    }
    ensure_finite("adapter rows", adapters.iter().flat_map(|a| a.iter()))?;
    Ok(AdapterMatrix {
        rows: DMatrix::from_fn(adapters.len(), d, |i, j| adapters[i][j]),
        task_ids: task_ids.to_vec(),
        ridge_alpha,
        canonicalized: false,
    })
}

/// Global canonicalization `c = B^T (theta / s)`.
///
/// `s` is a single RMS scale (broadcast per coordinate so the stored vector
/// reads elementwise) and `B` aligns coordinates with the principal
/// directions of the uncentred second moment of the scaled adapters. Each
/// column of `B` is sign-fixed so its first nonzero loading is positive.
/// Directions sharing an eigenvalue are rotated within their eigenspace to
/// the nearest coordinate axes, which makes the fit on already-canonical
/// data the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canonicalizer {
    pub scale: DVector<f64>,
    pub signs: DVector<f64>,
    pub basis: DMatrix<f64>,
    /// Set when the adapters had zero energy and the scale was clamped to 1.
    pub zero_scale: bool,
}

const SIGN_EPS: f64 = 1e-12;
const CLUSTER_RTOL: f64 = 1e-9;

impl Canonicalizer {
    pub fn identity(d: usize) -> Self {
        Self {
            scale: DVector::from_element(d, 1.0),
            signs: DVector::from_element(d, 1.0),
            basis: DMatrix::identity(d, d),
            zero_scale: false,
        }
    }

    pub fn fit(theta: &AdapterMatrix) -> Result<Self> {
        let n = theta.n();
        let d = theta.d_theta();
        if n < 2 {
            return Err(CoreError::InvalidConfig(
                "canonicalization needs at least two adapters".into(),
            ));
        }
        let rms = (theta.rows.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64).sqrt();
        let (s, zero_scale) = if rms > 0.0 { (rms, false) } else { (1.0, true) };
        let scaled = &theta.rows / s;
        let second = scaled.transpose() * &scaled / n as f64;
        let (vals, vecs) = sym_eigen_desc(&second);

        let mut basis = DMatrix::zeros(d, d);
        let tol = CLUSTER_RTOL * vals[0].abs().max(f64::MIN_POSITIVE);
        let mut start = 0;
        let mut used = vec![false; d];
        while start < d {
            let mut end = start + 1;
            while end < d && (vals[start] - vals[end]).abs() <= tol {
                end += 1;
            }
            let block = vecs.columns(start, end - start).into_owned();
            let aligned = align_to_axes(&block, &mut used);
            basis.columns_mut(start, end - start).copy_from(&aligned);
            start = end;
        }

        let mut signs = DVector::from_element(d, 1.0);
        for j in 0..d {
            let first = basis.column(j).iter().copied().find(|v| v.abs() > SIGN_EPS);
            if first.is_some_and(|v| v < 0.0) {
                signs[j] = -1.0;
                basis.column_mut(j).neg_mut();
            }
        }
        Ok(Self {
            scale: DVector::from_element(d, s),
            signs,
            basis,
            zero_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(&theta.component_div(&self.scale))
    }

    pub fn invert(&self, canonical: &DVector<f64>) -> DVector<f64> {
        (&self.basis * canonical).component_mul(&self.scale)
    }

    pub fn apply_matrix(&self, theta: &AdapterMatrix) -> AdapterMatrix {
        let mut rows = theta.rows.clone();
        for i in 0..rows.nrows() {
            let c = self.apply(&theta.row(i));
            rows.row_mut(i).copy_from(&c.transpose());
        }
        AdapterMatrix {
            rows,
            task_ids: theta.task_ids.clone(),
            ridge_alpha: theta.ridge_alpha,
            canonicalized: true,
        }
    }
}

/// Rotates an orthonormal block within its span towards the coordinate axes
/// it overlaps most (polar factor of `block^T P`). Axes claimed by earlier
/// blocks are skipped.
fn align_to_axes(block: &DMatrix<f64>, used: &mut [bool]) -> DMatrix<f64> {
    let (d, m) = block.shape();
    if m == 1 {
        if let Some(k) = (0..d).max_by(|&a, &b| {
            block[(a, 0)].abs().total_cmp(&block[(b, 0)].abs()).then(b.cmp(&a))
        }) {
            used[k] = true;
        }
        return block.clone();
    }
    let mut weights: Vec<(usize, f64)> = (0..d)
        .filter(|k| !used[*k])
        .map(|k| (k, block.row(k).norm_squared()))
        .collect();
    weights.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if weights.len() < m {
        return block.clone();
    }
    let mut axes: Vec<usize> = weights[..m].iter().map(|(k, _)| *k).collect();
    axes.sort_unstable();
    let mut selector = DMatrix::zeros(d, m);
    for (j, &k) in axes.iter().enumerate() {
        selector[(k, j)] = 1.0;
        used[k] = true;
    }
    let cross = block.transpose() * &selector;
    let svd = cross.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => block * (u * v_t),
        _ => block.clone(),
    }
}
