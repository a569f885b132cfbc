use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{NodeError, Result, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Classical fourth-order Runge-Kutta with `ceil(span / max_step)` equal steps.
    Rk4,
    /// Dormand-Prince 5(4) with embedded error control.
    Rk45,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub t0: f64,
    pub t1: f64,
    /// Run the step-size stiffness diagnostic in adaptive mode.
    pub stiffness_check: bool,
    pub max_steps: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk45,
            rtol: 1e-6,
            atol: 1e-9,
            max_step: 0.1,
            t0: 0.0,
            t1: 1.0,
            stiffness_check: true,
            max_steps: 200_000,
        }
    }
}

impl SolveConfig {
    pub fn adaptive(t0: f64, t1: f64, rtol: f64, atol: f64) -> Self {
        Self {
            t0,
            t1,
            rtol,
            atol,
            max_step: (t1 - t0).abs(),
            ..Self::default()
        }
    }

    pub fn fixed(t0: f64, t1: f64, max_step: f64) -> Self {
        Self {
            method: Method::Rk4,
            t0,
            t1,
            max_step,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NodeError::InvalidConfig(msg.to_string()));
        if !(self.t0.is_finite() && self.t1.is_finite()) || self.t0 >= self.t1 {
            return bad("require finite t0 < t1");
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.max_step > 0.0) {
            return bad("max_step must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub min_step: f64,
    pub stiff: bool,
    /// Step cap in effect at the end of the solve; smaller than `max_step`
    /// when the stiffness detector fired.
    pub final_max_step: f64,
}

impl SolveStats {
    fn new(cfg: &SolveConfig) -> Self {
        Self {
            method: cfg.method,
            rtol: cfg.rtol,
            atol: cfg.atol,
            max_step: cfg.max_step,
            steps: 0,
            rejected: 0,
            rhs_evals: 0,
            min_step: f64::INFINITY,
            stiff: false,
            final_max_step: cfg.max_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub z1: DVector<f64>,
    pub stats: SolveStats,
}

/// Flow of `field` from `cfg.t0` to `cfg.t1` starting at `z0`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    cfg: &SolveConfig,
) -> Result<Solution> {
    cfg.validate()?;
    if z0.len() != field.dim() {
        return Err(NodeError::DimensionMismatch {
            expected: field.dim(),
            got: z0.len(),
        });
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(NodeError::NonFinite { t: cfg.t0 });
    }
    let (z1, stats) = solve_ivp(|t, z| field.eval(z, t), z0, cfg.t0, cfg.t1, cfg)?;
    Ok(Solution { z1, stats })
}

pub fn integrate_batch<F: VectorField + Sync + ?Sized>(
    field: &F,
    z0s: &[DVector<f64>],
    cfg: &SolveConfig,
) -> Vec<Result<Solution>> {
    z0s.par_iter().map(|z0| integrate(field, z0, cfg)).collect()
}

/// Integrates `dy/dt = rhs(t, y)` from `t_start` to `t_end`, which may run
/// backwards in time. Only the method, tolerances and step limits of `cfg`
/// are used.
pub fn solve_ivp<R>(
    rhs: R,
    y0: &DVector<f64>,
    t_start: f64,
    t_end: f64,
    cfg: &SolveConfig,
) -> Result<(DVector<f64>, SolveStats)>
where
    R: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut stats = SolveStats::new(cfg);
    if t_start == t_end {
        return Ok((y0.clone(), stats));
    }
    match cfg.method {
        Method::Rk4 => rk4(&rhs, y0, t_start, t_end, cfg, &mut stats).map(|y| (y, stats)),
        Method::Rk45 => dopri5(&rhs, y0, t_start, t_end, cfg, &mut stats).map(|y| (y, stats)),
    }
}

fn check_finite(y: &DVector<f64>, t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NodeError::NonFinite { t })
    }
}

fn rk4<R>(
    rhs: &R,
    y0: &DVector<f64>,
    t_start: f64,
    t_end: f64,
    cfg: &SolveConfig,
    stats: &mut SolveStats,
) -> Result<DVector<f64>>
where
    R: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let span = t_end - t_start;
    let n = (span.abs() / cfg.max_step).ceil().max(1.0) as usize;
    if n > cfg.max_steps {
        return Err(NodeError::TooManySteps {
            t: t_start,
            max_steps: cfg.max_steps,
        });
    }
    let h = span / n as f64;
    let mut y = y0.clone();
    for i in 0..n {
        let t = t_start + h * i as f64;
        let k1 = rhs(t, &y);
        let k2 = rhs(t + 0.5 * h, &(&y + &k1 * (0.5 * h)));
        let k3 = rhs(t + 0.5 * h, &(&y + &k2 * (0.5 * h)));
        let k4 = rhs(t + h, &(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        check_finite(&y, t + h)?;
    }
    stats.steps = n;
    stats.rhs_evals = 4 * n;
    stats.min_step = h.abs();
    Ok(y)
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// difference between fifth- and fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const STIFF_LIMIT: f64 = 3.25;
const STIFF_COUNT: usize = 15;

fn error_norm(err: &DVector<f64>, y: &DVector<f64>, y_new: &DVector<f64>, cfg: &SolveConfig) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(y.iter().zip(y_new.iter()))
        .map(|(e, (a, b))| {
            let scale = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / scale).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn initial_step<R>(rhs: &R, t: f64, y: &DVector<f64>, f0: &DVector<f64>, dir: f64, cfg: &SolveConfig) -> f64
where
    R: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let zero = DVector::zeros(y.len());
    let d0 = error_norm(y, y, y, cfg).max(error_norm(&zero, y, y, cfg));
    let d0 = error_norm(y, &zero, &zero, cfg).min(d0);
    let d1 = error_norm(f0, y, y, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(cfg.max_step);
    let y1 = y + f0 * (dir * h0);
    let f1 = rhs(t + dir * h0, &y1);
    let d2 = error_norm(&(f1 - f0), y, y, cfg) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(cfg.max_step)
}

fn dopri5<R>(
    rhs: &R,
    y0: &DVector<f64>,
    t_start: f64,
    t_end: f64,
    cfg: &SolveConfig,
    stats: &mut SolveStats,
) -> Result<DVector<f64>>
where
    R: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let dir = (t_end - t_start).signum();
    let mut t = t_start;
    let mut y = y0.clone();
    let mut k1 = rhs(t, &y);
    stats.rhs_evals += 1;
    check_finite(&k1, t)?;
    let mut max_step = cfg.max_step;
    let mut h = initial_step(rhs, t, &y, &k1, dir, cfg);
    stats.rhs_evals += 1;
    let mut stiff_hits = 0usize;
    let mut calm_steps = 0usize;
    let mut last_rejected = false;

    loop {
        let remaining = (t_end - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        if stats.steps + stats.rejected >= cfg.max_steps {
            return Err(NodeError::TooManySteps {
                t,
                max_steps: cfg.max_steps,
            });
        }
        let floor = 16.0 * f64::EPSILON * t.abs().max(1.0);
        if h < floor {
            stats.stiff = true;
            return Err(NodeError::StepUnderflow {
                t,
                h,
                steps: stats.steps,
            });
        }
        h = h.min(max_step);
        let last = h >= remaining;
        let hs = if last { remaining } else { h } * dir;

        let k2 = rhs(t + C2 * hs, &(&y + &k1 * (A21 * hs)));
        let k3 = rhs(t + C3 * hs, &(&y + (&k1 * A31 + &k2 * A32) * hs));
        let k4 = rhs(
            t + C4 * hs,
            &(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * hs),
        );
        let k5 = rhs(
            t + C5 * hs,
            &(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * hs),
        );
        let y_stage6 = &y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * hs;
        let k6 = rhs(t + hs, &y_stage6);
        let y_new = &y + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * hs;
        let k7 = rhs(t + hs, &y_new);
        stats.rhs_evals += 6;

        let err = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * hs;
        let err_norm = error_norm(&err, &y, &y_new, cfg);
        let finite = err_norm.is_finite() && y_new.iter().all(|v| v.is_finite());

        if finite && err_norm <= 1.0 {
            if cfg.stiffness_check {
                let num = (&k7 - &k6).norm_squared();
                let den = (&y_new - &y_stage6).norm_squared();
                if den > 0.0 && hs.abs() * (num / den).sqrt() > STIFF_LIMIT {
                    calm_steps = 0;
                    stiff_hits += 1;
                    if stiff_hits >= STIFF_COUNT {
                        stats.stiff = true;
                        max_step *= 0.5;
                        stiff_hits = 0;
                    }
                } else {
                    calm_steps += 1;
                    if calm_steps >= 6 {
                        stiff_hits = 0;
                    }
                }
            }
            stats.steps += 1;
            stats.min_step = stats.min_step.min(hs.abs());
            t = if last { t_end } else { t + hs };
            y = y_new;
            k1 = k7;
            let factor = if err_norm == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            let factor = if last_rejected { factor.min(1.0) } else { factor };
            last_rejected = false;
            h = hs.abs() * factor;
        } else {
            stats.rejected += 1;
            last_rejected = true;
            let factor = if finite {
                (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, 1.0)
            } else {
                MIN_FACTOR
            };
            h = hs.abs() * factor;
        }
    }
    stats.final_max_step = max_step;
    check_finite(&y, t)?;
    Ok(y)
}
