//! Executable check of the approximation bound for memory-composed adapters.
//!
//! For a task with ground-truth adapter `theta`, `u* = W^T theta` is its
//! subspace coordinate and `w*` the sparse fit of `u*` over the prototypes.
//! The composed adapter `M^T w*` then satisfies
//!
//! ```text
//! |theta - M^T w*| <= dist(theta, span W) + |u* - (M W)^T w*|
//! ```
//!
//! and, because the logistic loss is `|phi|`-Lipschitz in the adapter, the
//! empirical risk gap to the true adapter is at most `L` times that sum.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::prototypes::{l0_fit, L0Mode, PrototypeMemory};
use crate::synthdata::{EpisodeTask, FeatureMap, Sample};
use crate::{ensure_finite, CoreError, Result};

pub const TRIANGLE_TOL: f64 = 1e-9;

/// `L = max |phi|` over the sample: the logistic loss has slope at most one
/// in the margin.
pub fn lipschitz_constant(features: &[DVector<f64>]) -> Result<f64> {
    if features.is_empty() {
        return Err(CoreError::Empty("Lipschitz sample".into()));
    }
    ensure_finite("Lipschitz sample", features.iter().flat_map(|f| f.iter()))?;
    Ok(features.iter().map(|f| f.norm()).fold(0.0, f64::max))
}

pub fn lipschitz_from_radius(radius: f64) -> Result<f64> {
    if !radius.is_finite() || radius < 0.0 {
        return Err(CoreError::InvalidConfig("input radius must be finite and nonnegative".into()));
    }
    Ok(radius)
}

/// Uniform bound on the logistic loss for `|phi| <= radius` and
/// `|theta| <= theta_radius`.
pub fn loss_bound(radius: f64, theta_radius: f64) -> f64 {
    let m = radius * theta_radius;
    m + (-m).exp().ln_1p()
}

fn logistic_loss(theta: &DVector<f64>, phi: &DVector<f64>, y: u8) -> f64 {
    let z = theta.dot(phi);
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - f64::from(y) * z
}

pub fn empirical_risk(theta: &DVector<f64>, features: &[DVector<f64>], labels: &[u8]) -> f64 {
    features
        .iter()
        .zip(labels)
        .map(|(phi, &y)| logistic_loss(theta, phi, y))
        .sum::<f64>()
        / features.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub task_id: String,
    /// Distance of the true adapter to the retained subspace.
    pub eps_app: f64,
    /// Sparse-fit residual of this task inside the subspace.
    pub eps_task: f64,
    /// `|theta - M^T w*|`.
    pub approx_error: f64,
    pub eps_m_hat: f64,
    pub eps_m_upper: f64,
    pub lipschitz: f64,
    pub emp_gap: f64,
    /// `L (eps_app + eps_task)`.
    pub task_bound: f64,
    /// `L (eps_app + eps_m_upper)`.
    pub deterministic_bound: f64,
    pub triangle_holds: bool,
    pub task_bound_holds: bool,
    pub satisfied: bool,
    /// `|R(f) - R_hat(f)|` for the memory and true adapters when a
    /// population sample is supplied.
    pub gen_gap_memory: Option<f64>,
    pub gen_gap_oracle: Option<f64>,
}

/// Evaluates the decomposition for one task on `query`, optionally with a
/// large fresh sample standing in for the population risk.
pub fn check_bound(
    task: &EpisodeTask,
    fmap: &FeatureMap,
    memory: &PrototypeMemory,
    r_sparse: usize,
    mode: L0Mode,
    query: &[Sample],
    population: Option<&[Sample]>,
) -> Result<BoundReport> {
    if !memory.is_frozen() {
        return Err(CoreError::NotFrozen("bound checking"));
    }
    let cert = memory
        .certificate()
        .ok_or(CoreError::NotFrozen("bound checking without a coverage certificate"))?;
    let theta = task
        .theta_true
        .as_ref()
        .ok_or_else(|| CoreError::Undefined(format!("{} has no ground-truth adapter", task.task_id)))?;
    if query.is_empty() {
        return Err(CoreError::Empty("query sample".into()));
    }
    let proj = memory.projection();
    let u = proj.project(theta);
    let eps_app = (theta - proj.lift(&u)).norm();
    let fit = l0_fit(&u, &memory.lifted(), r_sparse, mode)?;
    let theta_mem = memory.compose(&fit.w)?;
    let approx_error = (theta - &theta_mem).norm();

    let features: Vec<DVector<f64>> = query.iter().map(|s| fmap.apply(&s.x)).collect();
    let labels: Vec<u8> = query.iter().map(|s| s.y).collect();
    let lipschitz = lipschitz_constant(&features)?;
    let emp_gap = (empirical_risk(&theta_mem, &features, &labels) - empirical_risk(theta, &features, &labels)).abs();
    let task_bound = lipschitz * (eps_app + fit.residual);
    let eps_m_upper = cert.pct90.hi;
    let deterministic_bound = lipschitz * (eps_app + eps_m_upper);

    let (gen_gap_memory, gen_gap_oracle) = match population {
        Some(pop) if !pop.is_empty() => {
            let pf: Vec<DVector<f64>> = pop.iter().map(|s| fmap.apply(&s.x)).collect();
            let pl: Vec<u8> = pop.iter().map(|s| s.y).collect();
            (
                Some((empirical_risk(&theta_mem, &pf, &pl) - empirical_risk(&theta_mem, &features, &labels)).abs()),
                Some((empirical_risk(theta, &pf, &pl) - empirical_risk(theta, &features, &labels)).abs()),
            )
        }
        _ => (None, None),
    };

    Ok(BoundReport {
        task_id: task.task_id.clone(),
        eps_app,
        eps_task: fit.residual,
        approx_error,
        eps_m_hat: cert.eps_hat,
        eps_m_upper,
        lipschitz,
        emp_gap,
        task_bound,
        deterministic_bound,
        triangle_holds: approx_error <= eps_app + fit.residual + TRIANGLE_TOL,
        task_bound_holds: emp_gap <= task_bound + TRIANGLE_TOL,
        satisfied: emp_gap <= deterministic_bound + TRIANGLE_TOL,
        gen_gap_memory,
        gen_gap_oracle,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub n_tasks: usize,
    pub triangle_rate: f64,
    pub task_bound_rate: f64,
    pub certified_rate: f64,
}

pub fn summarize(reports: &[BoundReport]) -> BoundSummary {
    let n = reports.len().max(1) as f64;
    let rate = |f: &dyn Fn(&BoundReport) -> bool| reports.iter().filter(|r| f(r)).count() as f64 / n;
    BoundSummary {
        n_tasks: reports.len(),
        triangle_rate: rate(&|r| r.triangle_holds),
        task_bound_rate: rate(&|r| r.task_bound_holds),
        certified_rate: rate(&|r| r.satisfied),
    }
}

/// `sqrt((r ln K + ln(1/delta)) / n_q)`, reported with unit constant.
/// `k` is real-valued so the dictionary size can be any count `>= 1`.
pub fn sparsity_capacity_term(r: usize, k: f64, n_q: usize, delta: f64) -> Result<f64> {
    if r == 0 || n_q == 0 || !(k >= 1.0 && k.is_finite()) {
        return Err(CoreError::InvalidConfig("r and n_Q must be positive and K >= 1".into()));
    }
    if !(0.0 < delta && delta < 1.0) {
        return Err(CoreError::InvalidConfig("delta must lie in (0, 1)".into()));
    }
    Ok(((r as f64 * k.ln() + (1.0 / delta).ln()) / n_q as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Least-squares `c` in `gap ~ c / sqrt(n)`.
    pub coefficient: f64,
    /// `gap / (c / sqrt(n))` per sample size.
    pub ratios: Vec<f64>,
    pub within_factor: bool,
}

/// Fits `gap = c / sqrt(n)` and checks every measured gap is at most
/// `factor` times the fitted curve.
pub fn fit_inverse_sqrt(sizes: &[usize], gaps: &[f64], factor: f64) -> Result<ScalingFit> {
    if sizes.len() != gaps.len() || sizes.is_empty() {
        return Err(CoreError::InvalidConfig("sizes and gaps must be non-empty and aligned".into()));
    }
    ensure_finite("gaps", gaps.iter())?;
    let basis: Vec<f64> = sizes.iter().map(|&n| 1.0 / (n as f64).sqrt()).collect();
    let num: f64 = basis.iter().zip(gaps).map(|(b, g)| b * g).sum();
    let den: f64 = basis.iter().map(|b| b * b).sum();
    let coefficient = num / den;
    let ratios: Vec<f64> = basis
        .iter()
        .zip(gaps)
        .map(|(b, g)| if coefficient > 0.0 { g / (coefficient * b) } else { 0.0 })
        .collect();
    Ok(ScalingFit {
        within_factor: ratios.iter().all(|r| *r <= factor),
        coefficient,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lipschitz_examples() {
        assert_eq!(lipschitz_from_radius(1.0).unwrap(), 1.0);
        assert!(lipschitz_from_radius(f64::INFINITY).is_err());
        let f = vec![DVector::from_vec(vec![0.6, 0.8]), DVector::from_vec(vec![0.1, 0.0])];
        assert!((lipschitz_constant(&f).unwrap() - 1.0).abs() < 1e-15);
        let scaled: Vec<_> = f.iter().map(|v| v * 3.0).collect();
        assert!((lipschitz_constant(&scaled).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn capacity_term_examples() {
        let e = std::f64::consts::E;
        assert!((sparsity_capacity_term(1, e, 2, 1.0 / e).unwrap() - 1.0).abs() < 1e-12);
        let a = sparsity_capacity_term(2, 10.0, 100, 0.05).unwrap();
        let b = sparsity_capacity_term(2, 10.0, 200, 0.05).unwrap();
        assert!((a / b - 2f64.sqrt()).abs() < 1e-12);
        assert!(sparsity_capacity_term(1, 1.0, 1, 1.0).is_err());
    }

    #[test]
    fn inverse_sqrt_fit_is_exact_on_exact_data() {
        let sizes = [50, 100, 200, 400];
        let gaps: Vec<f64> = sizes.iter().map(|&n| 0.7 / (n as f64).sqrt()).collect();
        let fit = fit_inverse_sqrt(&sizes, &gaps, 2.0).unwrap();
        assert!((fit.coefficient - 0.7).abs() < 1e-12);
        assert!(fit.within_factor);
    }
}
