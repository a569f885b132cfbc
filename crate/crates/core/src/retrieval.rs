//! Sparse nonnegative retrieval over a frozen prototype memory.
//!
//! For a task estimate `theta_hat` and prior logits `v` the activations solve
//!
//! ```text
//! min_{w >= 0}  1/2 |M^T w - theta_hat|^2 + gamma |w - softmax(v)|^2 + lambda sum(w)
//! ```
//!
//! by accelerated proximal gradient with monotone restart. The logits come
//! from a small network over task descriptors, trained by differentiating
//! through the unrolled solver steps.

use fastweight_node::{adjoint_gradient, integrate, MlpField, SolveConfig, VectorField};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::sym_eigen_desc;
use crate::prototypes::PrototypeMemory;
use crate::seeds::{derive_seed, rng_from};
use crate::stats::{auc, mean};
use crate::synthdata::{sigmoid, Partition};
use crate::{ensure_finite, CoreError, Result};

pub const MAX_UNROLL: usize = 20;
pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [1e-6, 1e-5, 1e-4, 1e-3];
pub const DEFAULT_GAMMA_GRID: [f64; 4] = [0.0, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximalConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub t_prox: usize,
    /// `None` uses the inverse Lipschitz constant of the smooth part.
    pub step_size: Option<f64>,
    pub tol: f64,
    /// Replace the quadratic proximity term by `gamma * KL(w || softmax(v))`.
    pub kl_proximity: bool,
}

impl Default for ProximalConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            gamma: 1e-1,
            t_prox: MAX_UNROLL,
            step_size: None,
            tol: 1e-8,
            kl_proximity: false,
        }
    }
}

impl ProximalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CoreError::InvalidConfig("lambda must be finite and nonnegative".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(CoreError::InvalidConfig("gamma must be finite and nonnegative".into()));
        }
        if self.t_prox == 0 || self.t_prox > MAX_UNROLL {
            return Err(CoreError::InvalidConfig(format!(
                "t_prox must lie in 1..={MAX_UNROLL}"
            )));
        }
        if let Some(step) = self.step_size {
            if !(step > 0.0 && step.is_finite()) {
                return Err(CoreError::InvalidConfig("step size must be positive".into()));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(CoreError::InvalidConfig("tol must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Prototype rows plus the cached Lipschitz constant `sigma_max(M)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOperator {
    rows: DMatrix<f64>,
    lipschitz: f64,
}

impl RetrievalOperator {
    pub fn new(memory: &PrototypeMemory) -> Result<Self> {
        if !memory.is_frozen() {
            return Err(CoreError::NotFrozen("retrieval"));
        }
        Self::from_rows(memory.rows().clone())
    }

    /// Operator over an arbitrary `K x d` dictionary.
    pub fn from_rows(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(CoreError::Empty("dictionary".into()));
        }
        ensure_finite("dictionary", rows.iter())?;
        let gram = if rows.nrows() <= rows.ncols() {
            &rows * rows.transpose()
        } else {
            rows.transpose() * &rows
        };
        let (vals, _) = sym_eigen_desc(&gram);
        Ok(Self {
            lipschitz: vals[0].max(0.0),
            rows,
        })
    }

    pub fn k(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// `M^T w`.
    pub fn compose(&self, w: &DVector<f64>) -> DVector<f64> {
        self.rows.tr_mul(w)
    }

    /// `M M^T x`.
    fn gram_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.rows * self.rows.tr_mul(x)
    }

    pub fn step_size(&self, cfg: &ProximalConfig) -> f64 {
        if let Some(step) = cfg.step_size {
            return step;
        }
        let l = if cfg.kl_proximity {
            self.lipschitz
        } else {
            self.lipschitz + 2.0 * cfg.gamma
        };
        if l > 0.0 {
            1.0 / l
        } else {
            1.0
        }
    }
}

pub fn softmax(v: &DVector<f64>) -> DVector<f64> {
    let top = v.max();
    let e = v.map(|x| (x - top).exp());
    let total = e.sum();
    e / total
}

/// One solver step, kept for reverse-mode differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub beta: f64,
    /// Diagonal derivative of the proximal map at this step.
    pub jac: DVector<f64>,
    /// The step was rejected and the iterate kept unchanged.
    pub hold: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxSolve {
    pub w: DVector<f64>,
    pub prior: DVector<f64>,
    pub objective_trace: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub step_size: f64,
    pub tape: Vec<StepRecord>,
}

struct Problem<'a> {
    op: &'a RetrievalOperator,
    theta_hat: &'a DVector<f64>,
    prior: &'a DVector<f64>,
    lambda: f64,
    gamma: f64,
    kl: bool,
    tau: f64,
}

fn solve_kl_scalar(b: f64, c: f64) -> f64 {
    // w + c ln w = b, Newton in u = ln w from a point with g(u) >= 0
    let mut u = if b > 0.0 { (b + 1.0).ln() } else { 0.0 };
    for _ in 0..200 {
        let e = u.exp();
        let step = (e + c * u - b) / (e + c);
        u -= step;
        if step.abs() <= 1e-15 * u.abs().max(1.0) {
            break;
        }
    }
    u.exp()
}

impl Problem<'_> {
    fn smooth_grad(&self, y: &DVector<f64>) -> DVector<f64> {
        let resid = self.op.compose(y) - self.theta_hat;
        let mut g = &self.op.rows * resid;
        if !self.kl {
            g += (y - self.prior) * (2.0 * self.gamma);
        }
        g
    }

    fn prox(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let shift = self.tau * self.lambda;
        if self.kl && self.gamma > 0.0 {
            let c = self.tau * self.gamma;
            let x = DVector::from_fn(z.len(), |j, _| {
                solve_kl_scalar(z[j] - shift + c * self.prior[j].ln(), c)
            });
            let jac = x.map(|w| w / (w + c));
            (x, jac)
        } else {
            let x = z.map(|v| (v - shift).max(0.0));
            let jac = z.map(|v| if v - shift > 0.0 { 1.0 } else { 0.0 });
            (x, jac)
        }
    }

    fn step_from(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        self.prox(&(y - self.smooth_grad(y) * self.tau))
    }

    fn objective(&self, w: &DVector<f64>) -> f64 {
        let fit = 0.5 * (self.op.compose(w) - self.theta_hat).norm_squared();
        let proximity = if self.kl {
            self.gamma
                * w.iter()
                    .zip(self.prior.iter())
                    .map(|(&x, &s)| if x > 0.0 { x * (x / s).ln() - x + s } else { s })
                    .sum::<f64>()
        } else {
            self.gamma * (w - self.prior).norm_squared()
        };
        fit + proximity + self.lambda * w.sum()
    }

    fn residual(&self, x: &DVector<f64>) -> f64 {
        (x - self.step_from(x).0).norm() / self.tau
    }
}

/// Accelerated proximal gradient from `softmax(v)` for at most `max_iter`
/// steps. Whenever the momentum step would raise the objective the momentum
/// is reset and a plain proximal-gradient step is taken instead, so the
/// recorded objective trace never increases.
pub fn solve_proximal_with_budget(
    op: &RetrievalOperator,
    theta_hat: &DVector<f64>,
    v: &DVector<f64>,
    cfg: &ProximalConfig,
    max_iter: usize,
) -> Result<ProxSolve> {
    if theta_hat.len() != op.d() {
        return Err(CoreError::DimensionMismatch {
            what: "adapter estimate",
            expected: op.d(),
            got: theta_hat.len(),
        });
    }
    if v.len() != op.k() {
        return Err(CoreError::DimensionMismatch {
            what: "retrieval logits",
            expected: op.k(),
            got: v.len(),
        });
    }
    ensure_finite("retrieval logits", v.iter())?;
    ensure_finite("adapter estimate", theta_hat.iter())?;
    let prior = softmax(v);
    let tau = op.step_size(cfg);
    let problem = Problem {
        op,
        theta_hat,
        prior: &prior,
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        kl: cfg.kl_proximity,
        tau,
    };
    let mut x = prior.clone();
    let mut x_prev = x.clone();
    let mut t = 1.0f64;
    let mut f_x = problem.objective(&x);
    let mut trace = vec![f_x];
    let mut tape = Vec::with_capacity(max_iter.min(MAX_UNROLL));
    let mut restarts = 0;
    let mut converged = false;
    let mut residual = problem.residual(&x);
    let mut iterations = 0;
    if residual <= cfg.tol {
        converged = true;
    }
    while !converged && iterations < max_iter {
        let mut t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mut beta = (t - 1.0) / t_next;
        let y = &x + (&x - &x_prev) * beta;
        let (mut x_new, mut jac) = problem.step_from(&y);
        let mut f_new = problem.objective(&x_new);
        if f_new > f_x {
            restarts += 1;
            beta = 0.0;
            t_next = 1.0;
            let (xr, jr) = problem.step_from(&x);
            x_new = xr;
            jac = jr;
            f_new = problem.objective(&x_new);
        }
        iterations += 1;
        if !f_new.is_finite() {
            trace.push(f_new);
            return Err(CoreError::Diverged {
                iteration: iterations,
                trace,
            });
        }
        // guard against rounding-level increases on plain steps
        let hold = f_new > f_x;
        if hold {
            f_new = f_x;
            x_new = x.clone();
        }
        tape.push(StepRecord { beta, jac, hold });
        x_prev = std::mem::replace(&mut x, x_new);
        t = t_next;
        f_x = f_new;
        trace.push(f_x);
        residual = problem.residual(&x);
        converged = residual <= cfg.tol;
    }
    Ok(ProxSolve {
        w: x,
        prior,
        objective_trace: trace,
        kkt_residual: residual,
        iterations,
        restarts,
        converged,
        step_size: tau,
        tape,
    })
}

/// Solve with at most `cfg.t_prox` unrolled steps.
pub fn solve_proximal(op: &RetrievalOperator, theta_hat: &DVector<f64>, v: &DVector<f64>, cfg: &ProximalConfig) -> Result<ProxSolve> {
    cfg.validate()?;
    solve_proximal_with_budget(op, theta_hat, v, cfg, cfg.t_prox)
}

/// Objective value of the retrieval program at `w`.
pub fn proximal_objective(op: &RetrievalOperator, theta_hat: &DVector<f64>, v: &DVector<f64>, cfg: &ProximalConfig, w: &DVector<f64>) -> f64 {
    let prior = softmax(v);
    Problem {
        op,
        theta_hat,
        prior: &prior,
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        kl: cfg.kl_proximity,
        tau: op.step_size(cfg),
    }
    .objective(w)
}

/// Reverse pass through the recorded steps: maps `dL/dw` to `dL/dsoftmax(v)`.
pub fn unrolled_backward(
    op: &RetrievalOperator,
    solve: &ProxSolve,
    cfg: &ProximalConfig,
    w_bar: &DVector<f64>,
) -> DVector<f64> {
    let k = op.k();
    let n = solve.tape.len();
    let tau = solve.step_size;
    let mut adj: Vec<DVector<f64>> = vec![DVector::zeros(k); n + 1];
    adj[n] = w_bar.clone();
    let mut prior_bar = DVector::zeros(k);
    let kl = cfg.kl_proximity && cfg.gamma > 0.0;
    for step in (0..n).rev() {
        let rec = &solve.tape[step];
        if rec.hold {
            let carried = adj[step + 1].clone();
            adj[step] += carried;
            continue;
        }
        let z_bar = rec.jac.component_mul(&adj[step + 1]);
        let mut y_bar = &z_bar - op.gram_apply(&z_bar) * tau;
        if kl {
            let c = tau * cfg.gamma;
            prior_bar += z_bar.component_div(&solve.prior) * c;
        } else if !cfg.kl_proximity {
            y_bar -= &z_bar * (2.0 * tau * cfg.gamma);
            prior_bar += &z_bar * (2.0 * tau * cfg.gamma);
        }
        adj[step] += &y_bar * (1.0 + rec.beta);
        let back = step.saturating_sub(1);
        adj[back] -= &y_bar * rec.beta;
    }
    prior_bar + &adj[0]
}

/// Gradient of `softmax` pulled back to the logits.
pub fn softmax_backward(prior: &DVector<f64>, prior_bar: &DVector<f64>) -> DVector<f64> {
    let dot = prior.dot(prior_bar);
    prior.component_mul(&prior_bar.map(|g| g - dot))
}

/// Keeps the `r` largest entries (lowest index first on ties) and zeroes the
/// rest.
pub fn hard_top_r(w: &DVector<f64>, r: usize) -> DVector<f64> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let mut out = DVector::zeros(w.len());
    for &j in order.iter().take(r) {
        out[j] = w[j];
    }
    out
}

pub fn active_set(w: &DVector<f64>) -> Vec<usize> {
    (0..w.len()).filter(|&j| w[j] != 0.0).collect()
}

pub fn l0_norm(w: &DVector<f64>) -> usize {
    w.iter().filter(|v| **v != 0.0).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSolution {
    pub w: DVector<f64>,
    pub w_tilde: DVector<f64>,
    pub active_set: Vec<usize>,
    pub recon_before: f64,
    pub recon_after: f64,
    pub objective_trace: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub restarts: usize,
}

impl RetrievalSolution {
    pub fn residual_change(&self) -> f64 {
        self.recon_after - self.recon_before
    }
}

/// Solve followed by hard top-`r` truncation (skipped when `r` is `None`).
pub fn retrieve(
    op: &RetrievalOperator,
    theta_hat: &DVector<f64>,
    v: &DVector<f64>,
    cfg: &ProximalConfig,
    top_r: Option<usize>,
) -> Result<RetrievalSolution> {
    let solve = solve_proximal(op, theta_hat, v, cfg)?;
    Ok(finish_solution(op, theta_hat, solve, top_r))
}

fn finish_solution(op: &RetrievalOperator, theta_hat: &DVector<f64>, solve: ProxSolve, top_r: Option<usize>) -> RetrievalSolution {
    let w_tilde = match top_r {
        Some(r) => hard_top_r(&solve.w, r),
        None => solve.w.clone(),
    };
    RetrievalSolution {
        recon_before: (op.compose(&solve.w) - theta_hat).norm(),
        recon_after: (op.compose(&w_tilde) - theta_hat).norm(),
        active_set: active_set(&w_tilde),
        w: solve.w,
        w_tilde,
        objective_trace: solve.objective_trace,
        kkt_residual: solve.kkt_residual,
        iterations: solve.iterations,
        restarts: solve.restarts,
    }
}

pub fn compose_adapter(memory: &PrototypeMemory, w_tilde: &DVector<f64>) -> Result<DVector<f64>> {
    memory.compose(w_tilde)
}

/// Shannon entropy of `w / sum(w)`; zero for the zero vector.
pub fn activation_entropy(w: &DVector<f64>) -> f64 {
    let total: f64 = w.iter().filter(|v| **v > 0.0).sum();
    if total <= 0.0 {
        return 0.0;
    }
    -w.iter()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let p = v / total;
            p * p.ln()
        })
        .sum::<f64>()
}

fn entropy_gradient(w: &DVector<f64>) -> DVector<f64> {
    let total: f64 = w.iter().filter(|v| **v > 0.0).sum();
    if total <= 0.0 {
        return DVector::zeros(w.len());
    }
    let ent = activation_entropy(w);
    w.map(|v| if v > 0.0 { (-(v / total).ln() - ent) / total } else { 0.0 })
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean query cross-entropy of `sigma(theta . phi)`.
pub fn query_cross_entropy(features: &[DVector<f64>], labels: &[u8], theta: &DVector<f64>) -> Result<f64> {
    if features.is_empty() {
        return Err(CoreError::Empty("query set".into()));
    }
    Ok(features
        .iter()
        .zip(labels)
        .map(|(phi, &y)| {
            let z = theta.dot(phi);
            softplus(z) - f64::from(y) * z
        })
        .sum::<f64>()
        / features.len() as f64)
}

/// Query cross-entropy plus `lambda |w~|_1 + eta * entropy(w~)`.
pub fn outer_objective(
    features: &[DVector<f64>],
    labels: &[u8],
    theta: &DVector<f64>,
    w_tilde: &DVector<f64>,
    lambda: f64,
    eta: f64,
) -> Result<f64> {
    Ok(query_cross_entropy(features, labels, theta)?
        + lambda * w_tilde.iter().map(|v| v.abs()).sum::<f64>()
        + eta * activation_entropy(w_tilde))
}

/// Two-layer tanh network from descriptors to prototype logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalNet {
    pub d_in: usize,
    pub hidden: usize,
    pub k: usize,
    /// `w1 (hidden x d_in), b1, w2 (k x hidden), b2`, row-major.
    pub params: Vec<f64>,
}

struct NetCache {
    input: DVector<f64>,
    hidden: DVector<f64>,
}

impl RetrievalNet {
    pub fn n_params_for(d_in: usize, hidden: usize, k: usize) -> usize {
        hidden * d_in + hidden + k * hidden + k
    }

    pub fn new(d_in: usize, hidden: usize, k: usize, seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, "retrieval-net", 0));
        let n1 = Normal::new(0.0, 1.0 / (d_in.max(1) as f64).sqrt()).expect("valid");
        let n2 = Normal::new(0.0, 0.1 / (hidden.max(1) as f64).sqrt()).expect("valid");
        let mut params = Vec::with_capacity(Self::n_params_for(d_in, hidden, k));
        params.extend((0..hidden * d_in).map(|_| n1.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, hidden));
        params.extend((0..k * hidden).map(|_| n2.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, k));
        Self { d_in, hidden, k, params }
    }

    fn split(&self) -> (usize, usize, usize) {
        let o1 = self.hidden * self.d_in;
        let o2 = o1 + self.hidden;
        let o3 = o2 + self.k * self.hidden;
        (o1, o2, o3)
    }

    fn forward_cached(&self, z: &DVector<f64>) -> (DVector<f64>, NetCache) {
        let (o1, o2, o3) = self.split();
        let p = &self.params;
        let h = DVector::from_fn(self.hidden, |i, _| {
            let row = &p[i * self.d_in..(i + 1) * self.d_in];
            (row.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>() + p[o1 + i]).tanh()
        });
        let v = DVector::from_fn(self.k, |j, _| {
            let row = &p[o2 + j * self.hidden..o2 + (j + 1) * self.hidden];
            row.iter().zip(h.iter()).map(|(a, b)| a * b).sum::<f64>() + p[o3 + j]
        });
        (v, NetCache { input: z.clone(), hidden: h })
    }

    pub fn forward(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.d_in {
            return Err(CoreError::DimensionMismatch {
                what: "descriptor",
                expected: self.d_in,
                got: z.len(),
            });
        }
        Ok(self.forward_cached(z).0)
    }

    /// Parameter gradient and input gradient for `dL/dv = v_bar`.
    fn backward(&self, cache: &NetCache, v_bar: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
        let (o1, o2, o3) = self.split();
        let p = &self.params;
        let mut g = vec![0.0; p.len()];
        let mut h_bar: DVector<f64> = DVector::zeros(self.hidden);
        for j in 0..self.k {
            g[o3 + j] = v_bar[j];
            for i in 0..self.hidden {
                g[o2 + j * self.hidden + i] = v_bar[j] * cache.hidden[i];
                h_bar[i] += v_bar[j] * p[o2 + j * self.hidden + i];
            }
        }
        let mut z_bar = DVector::zeros(self.d_in);
        for i in 0..self.hidden {
            let pre_bar = h_bar[i] * (1.0 - cache.hidden[i] * cache.hidden[i]);
            g[o1 + i] = pre_bar;
            for c in 0..self.d_in {
                g[i * self.d_in + c] = pre_bar * cache.input[c];
                z_bar[c] += pre_bar * p[i * self.d_in + c];
            }
        }
        (g, z_bar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransformKind {
    Identity,
    /// Continuous flow `dz/dt = f(z, t)` over `[0, 1]`.
    Ode,
    /// Single residual step `z + f(z, 0)`.
    Residual,
}

/// Optional learned map applied to descriptors before the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DescriptorTransform {
    Identity,
    Ode { field: MlpField, solve: SolveConfig },
    Residual { field: MlpField },
}

impl DescriptorTransform {
    pub fn build(kind: &TransformKind, d_z: usize, hidden: usize, init_scale: f64, seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, "descriptor-transform", 0));
        match kind {
            TransformKind::Identity => Self::Identity,
            TransformKind::Ode => Self::Ode {
                field: MlpField::random(d_z, hidden, init_scale, false, &mut rng),
                solve: SolveConfig::adaptive(0.0, 1.0, 1e-6, 1e-8),
            },
            TransformKind::Residual => Self::Residual {
                field: MlpField::random(d_z, hidden, init_scale, false, &mut rng),
            },
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Self::Identity => 0,
            Self::Ode { field, .. } | Self::Residual { field } => field.n_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Identity => Vec::new(),
            Self::Ode { field, .. } | Self::Residual { field } => field.params(),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        match self {
            Self::Identity => Ok(()),
            Self::Ode { field, .. } | Self::Residual { field } => Ok(field.set_params(params)?),
        }
    }

    pub fn apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::Identity => Ok(z.clone()),
            Self::Ode { field, solve } => Ok(integrate(field, z, solve)?.z1),
            Self::Residual { field } => Ok(z + field.eval(z, 0.0)),
        }
    }

    fn param_gradient(&self, z: &DVector<f64>, out_bar: &DVector<f64>) -> Result<Vec<f64>> {
        match self {
            Self::Identity => Ok(Vec::new()),
            Self::Ode { field, solve } => {
                let res = adjoint_gradient(field, z, solve, |_| out_bar.clone())?;
                Ok(res.dl_dparams.iter().copied().collect())
            }
            Self::Residual { field } => Ok(field.vjp(z, 0.0, out_bar).1.iter().copied().collect()),
        }
    }
}

/// Everything the retrieval stage needs about one task. Only tasks from the
/// retrieval partitions may be used for training and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTask {
    pub task_id: String,
    pub partition: Partition,
    pub descriptor: DVector<f64>,
    pub theta_hat: DVector<f64>,
    pub query_features: Vec<DVector<f64>>,
    pub query_labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalModel {
    pub net: RetrievalNet,
    pub transform: DescriptorTransform,
    pub prox: ProximalConfig,
    /// `None` disables hard truncation.
    pub top_r: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrediction {
    pub solution: RetrievalSolution,
    pub theta: DVector<f64>,
    pub probabilities: Vec<f64>,
}

struct ForwardPass {
    cache: NetCache,
    solve: ProxSolve,
    w_tilde: DVector<f64>,
    theta: DVector<f64>,
}

impl RetrievalModel {
    fn check_task(&self, op: &RetrievalOperator, task: &RetrievalTask) -> Result<()> {
        if task.query_features.len() != task.query_labels.len() {
            return Err(CoreError::DimensionMismatch {
                what: "query labels",
                expected: task.query_features.len(),
                got: task.query_labels.len(),
            });
        }
        if self.net.k != op.k() {
            return Err(CoreError::DimensionMismatch {
                what: "network output",
                expected: op.k(),
                got: self.net.k,
            });
        }
        Ok(())
    }

    fn forward(&self, op: &RetrievalOperator, task: &RetrievalTask, max_iter: Option<usize>) -> Result<ForwardPass> {
        self.check_task(op, task)?;
        let z_in = self.transform.apply(&task.descriptor)?;
        if z_in.len() != self.net.d_in {
            return Err(CoreError::DimensionMismatch {
                what: "descriptor",
                expected: self.net.d_in,
                got: z_in.len(),
            });
        }
        let (v, cache) = self.net.forward_cached(&z_in);
        let solve = match max_iter {
            Some(n) => solve_proximal_with_budget(op, &task.theta_hat, &v, &self.prox, n)?,
            None => solve_proximal(op, &task.theta_hat, &v, &self.prox)?,
        };
        let w_tilde = match self.top_r {
            Some(r) => hard_top_r(&solve.w, r),
            None => solve.w.clone(),
        };
        let theta = op.compose(&w_tilde);
        Ok(ForwardPass {
            cache,
            solve,
            w_tilde,
            theta,
        })
    }

    pub fn predict(&self, op: &RetrievalOperator, task: &RetrievalTask) -> Result<TaskPrediction> {
        let pass = self.forward(op, task, None)?;
        let probabilities = task.query_features.iter().map(|phi| sigmoid(pass.theta.dot(phi))).collect();
        let solution = finish_solution(op, &task.theta_hat, pass.solve, self.top_r);
        Ok(TaskPrediction {
            solution,
            theta: pass.theta,
            probabilities,
        })
    }

    /// Outer loss of one task and its gradient with respect to
    /// `[network params, transform params]`. The hard top-r mask is treated
    /// as the identity in the backward pass.
    pub fn loss_and_gradient(&self, op: &RetrievalOperator, task: &RetrievalTask, lambda_outer: f64, eta: f64) -> Result<(f64, Vec<f64>)> {
        let pass = self.forward(op, task, None)?;
        let loss = outer_objective(&task.query_features, &task.query_labels, &pass.theta, &pass.w_tilde, lambda_outer, eta)?;
        let n = task.query_features.len() as f64;
        let mut theta_bar = DVector::zeros(op.d());
        for (phi, &y) in task.query_features.iter().zip(&task.query_labels) {
            theta_bar += phi * ((sigmoid(pass.theta.dot(phi)) - f64::from(y)) / n);
        }
        let mut w_bar = op.rows() * theta_bar;
        w_bar += pass.w_tilde.map(|v| if v > 0.0 { lambda_outer } else { 0.0 });
        w_bar += entropy_gradient(&pass.w_tilde) * eta;
        let prior_bar = unrolled_backward(op, &pass.solve, &self.prox, &w_bar);
        let v_bar = softmax_backward(&pass.solve.prior, &prior_bar);
        let (mut grad, z_bar) = self.net.backward(&pass.cache, &v_bar);
        grad.extend(self.transform.param_gradient(&task.descriptor, &z_bar)?);
        Ok((loss, grad))
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.net.params.clone();
        p.extend(self.transform.params());
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.net.params.len();
        if params.len() != n + self.transform.n_params() {
            return Err(CoreError::DimensionMismatch {
                what: "model parameters",
                expected: n + self.transform.n_params(),
                got: params.len(),
            });
        }
        ensure_finite("model parameters", params.iter())?;
        self.net.params.copy_from_slice(&params[..n]);
        self.transform.set_params(&params[n..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Minimum active-set Jaccard between consecutive epochs for stopping.
    pub jaccard_threshold: f64,
    pub eta: f64,
    /// Overrides the solver lambda in the outer loss when set.
    pub outer_lambda: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            max_epochs: 1000,
            patience: 40,
            batch_size: 100,
            jaccard_threshold: 0.9,
            eta: 1e-3,
            outer_lambda: None,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub active_jaccard: f64,
    pub mean_l0: f64,
    pub mean_l0_tilde: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: RetrievalModel,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_auc: f64,
    pub per_task_auc: Vec<f64>,
    pub mean_loss: f64,
    pub mean_l0: f64,
    pub mean_l0_tilde: f64,
    pub active_sets: Vec<Vec<usize>>,
    pub predictions: Vec<TaskPrediction>,
}

pub fn evaluate(model: &RetrievalModel, op: &RetrievalOperator, tasks: &[RetrievalTask], lambda_outer: f64, eta: f64) -> Result<Evaluation> {
    if tasks.is_empty() {
        return Err(CoreError::Empty("evaluation tasks".into()));
    }
    let preds = tasks
        .par_iter()
        .map(|t| model.predict(op, t))
        .collect::<Result<Vec<_>>>()?;
    let mut aucs = Vec::with_capacity(tasks.len());
    let mut losses = Vec::with_capacity(tasks.len());
    for (t, p) in tasks.iter().zip(&preds) {
        aucs.push(auc(&p.probabilities, &t.query_labels)?);
        losses.push(outer_objective(&t.query_features, &t.query_labels, &p.theta, &p.solution.w_tilde, lambda_outer, eta)?);
    }
    Ok(Evaluation {
        mean_auc: mean(&aucs),
        per_task_auc: aucs,
        mean_loss: mean(&losses),
        mean_l0: mean(&preds.iter().map(|p| l0_norm(&p.solution.w) as f64).collect::<Vec<_>>()),
        mean_l0_tilde: mean(&preds.iter().map(|p| l0_norm(&p.solution.w_tilde) as f64).collect::<Vec<_>>()),
        active_sets: preds.iter().map(|p| p.solution.active_set.clone()).collect(),
        predictions: preds,
    })
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_partition(tasks: &[RetrievalTask], allowed: Partition) -> Result<()> {
    for t in tasks {
        if t.partition != allowed {
            return Err(CoreError::Leakage(format!(
                "task {} from partition {} used where only {} is allowed",
                t.task_id,
                t.partition.as_str(),
                allowed.as_str()
            )));
        }
    }
    Ok(())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] + weight_decay * params[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// Adam on the outer loss with mini-batches of training tasks. After each
/// epoch the validation AUC is measured; training stops once the AUC has not
/// improved for `patience` epochs and the validation active sets are stable
/// (mean Jaccard with the previous epoch at least `jaccard_threshold`). The
/// best-AUC parameters are returned.
pub fn train_retrieval(
    mut model: RetrievalModel,
    op: &RetrievalOperator,
    train: &[RetrievalTask],
    val: &[RetrievalTask],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_partition(train, Partition::RetTrain)?;
    check_partition(val, Partition::RetVal)?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Empty("retrieval training or validation tasks".into()));
    }
    if cfg.batch_size == 0 {
        return Err(CoreError::InvalidConfig("batch size must be positive".into()));
    }
    model.prox.validate()?;
    let lambda_outer = cfg.outer_lambda.unwrap_or(model.prox.lambda);
    let mut params = model.params();
    let mut adam = Adam::new(params.len());
    let mut history: Vec<EpochLog> = Vec::new();
    let initial = evaluate(&model, op, val, lambda_outer, cfg.eta)?;
    let mut best = (initial.mean_auc, initial.mean_loss, params.clone(), 0usize);
    let mut prev_sets = initial.active_sets;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_from(derive_seed(cfg.seed, "epoch-shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| model.loss_and_gradient(op, &train[i], lambda_outer, cfg.eta))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; params.len()];
            for (loss, g) in &results {
                epoch_losses.push(*loss);
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b / batch.len() as f64;
                }
            }
            if grad.iter().any(|g| !g.is_finite()) || epoch_losses.iter().any(|l| !l.is_finite()) {
                return Err(CoreError::Diverged {
                    iteration: epoch,
                    trace: history.iter().map(|h| h.train_loss).collect(),
                });
            }
            adam.step(&mut params, &grad, cfg.learning_rate, cfg.weight_decay);
            model.set_params(&params)?;
            params = model.params();
        }
        let eval = evaluate(&model, op, val, lambda_outer, cfg.eta)?;
        let jac = mean(
            &eval
                .active_sets
                .iter()
                .zip(&prev_sets)
                .map(|(a, b)| jaccard(a, b))
                .collect::<Vec<_>>(),
        );
        history.push(EpochLog {
            epoch,
            train_loss: mean(&epoch_losses),
            val_loss: eval.mean_loss,
            val_auc: eval.mean_auc,
            active_jaccard: jac,
            mean_l0: eval.mean_l0,
            mean_l0_tilde: eval.mean_l0_tilde,
        });
        prev_sets = eval.active_sets;
        // AUC ties are broken by validation loss
        let tied = (eval.mean_auc - best.0).abs() <= 1e-12;
        if eval.mean_auc > best.0 + 1e-12 || (tied && eval.mean_loss < best.1) {
            best = (eval.mean_auc, eval.mean_loss, params.clone(), epoch);
        }
        if epoch - best.3 >= cfg.patience && jac >= cfg.jaccard_threshold {
            stopped_early = true;
            break;
        }
    }
    model.set_params(&best.2)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.3,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub eta: f64,
    pub val_auc: f64,
    pub mean_l0: f64,
    pub mean_l0_tilde: f64,
}

/// Evaluates every `(lambda, eta)` cell with `eval_cell`, which returns
/// `(validation AUC, mean pre-threshold l0, mean post-threshold l0)`.
pub fn sweep_lambda_eta<F>(lambdas: &[f64], etas: &[f64], eval_cell: F) -> Result<Vec<SweepCell>>
where
    F: Fn(f64, f64) -> Result<(f64, f64, f64)>,
{
    if lambdas.is_empty() || etas.is_empty() {
        return Err(CoreError::Empty("sweep grid".into()));
    }
    let mut cells = Vec::with_capacity(lambdas.len() * etas.len());
    for &lambda in lambdas {
        for &eta in etas {
            let (val_auc, mean_l0, mean_l0_tilde) = eval_cell(lambda, eta)?;
            cells.push(SweepCell {
                lambda,
                eta,
                val_auc,
                mean_l0,
                mean_l0_tilde,
            });
        }
    }
    Ok(cells)
}

/// Sweep cell evaluation with a fixed model: the solver lambda is replaced by
/// the cell value and the cell eta only enters the reported loss.
pub fn evaluate_cell(model: &RetrievalModel, op: &RetrievalOperator, val: &[RetrievalTask], lambda: f64, eta: f64) -> Result<(f64, f64, f64)> {
    let mut m = model.clone();
    m.prox.lambda = lambda;
    let e = evaluate(&m, op, val, lambda, eta)?;
    Ok((e.mean_auc, e.mean_l0, e.mean_l0_tilde))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op_from(rows: &[f64], k: usize, d: usize) -> RetrievalOperator {
        RetrievalOperator::from_rows(DMatrix::from_row_slice(k, d, rows)).unwrap()
    }

    #[test]
    fn exact_prototype_is_recovered() {
        let op = op_from(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let cfg = ProximalConfig {
            lambda: 0.0,
            gamma: 0.0,
            tol: 1e-12,
            ..ProximalConfig::default()
        };
        let theta = DVector::from_vec(vec![0.0, 1.0]);
        let sol = solve_proximal_with_budget(&op, &theta, &DVector::zeros(2), &cfg, 10_000).unwrap();
        assert!((sol.w.clone() - DVector::from_vec(vec![0.0, 1.0])).amax() < 1e-9);
    }

    #[test]
    fn huge_lambda_zeroes_after_one_step() {
        let op = op_from(&[1.0, 2.0, -1.0, 0.5], 2, 2);
        let cfg = ProximalConfig {
            lambda: 1e9,
            gamma: 0.0,
            t_prox: 1,
            ..ProximalConfig::default()
        };
        let sol = solve_proximal(&op, &DVector::from_vec(vec![1.0, 1.0]), &DVector::zeros(2), &cfg).unwrap();
        assert_eq!(sol.w, DVector::zeros(2));
    }

    #[test]
    fn top_r_examples() {
        let w = DVector::from_vec(vec![3.0, 1.0, 2.0]);
        assert_eq!(hard_top_r(&w, 2), DVector::from_vec(vec![3.0, 0.0, 2.0]));
        assert_eq!(hard_top_r(&w, 3), w);
        let tie = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        assert_eq!(hard_top_r(&tie, 1), DVector::from_vec(vec![1.0, 0.0, 0.0]));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(activation_entropy(&DVector::from_vec(vec![0.0, 2.0, 0.0])), 0.0);
        assert!((activation_entropy(&DVector::from_vec(vec![0.5, 0.5, 0.5, 0.0])) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(activation_entropy(&DVector::zeros(3)), 0.0);
    }

    #[test]
    fn kl_scalar_solution() {
        for &(b, c) in &[(2.0, 0.5), (-3.0, 0.1), (0.0, 2.0), (50.0, 1e-3)] {
            let w = solve_kl_scalar(b, c);
            assert!((w + c * w.ln() - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn partition_guard() {
        let op = op_from(&[1.0], 1, 1);
        let model = RetrievalModel {
            net: RetrievalNet::new(1, 2, 1, 0),
            transform: DescriptorTransform::Identity,
            prox: ProximalConfig::default(),
            top_r: Some(1),
        };
        let task = RetrievalTask {
            task_id: "t".into(),
            partition: Partition::PreSeed,
            descriptor: DVector::zeros(1),
            theta_hat: DVector::zeros(1),
            query_features: vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![-1.0])],
            query_labels: vec![1, 0],
        };
        let res = train_retrieval(model, &op, std::slice::from_ref(&task), &[task.clone()], &TrainConfig::default());
        assert!(matches!(res, Err(CoreError::Leakage(_))));
    }
}
