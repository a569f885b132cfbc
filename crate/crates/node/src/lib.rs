//! Continuous-time blocks: parametric vector fields, explicit Runge-Kutta
//! integrators with error control, and adjoint sensitivities.
//!
//! The forward flow solves `dz/dt = f(z, t; phi)` from `t0` to `t1`. Gradients
//! of a terminal loss are recovered by integrating the co-state
//! `da/dt = -(df/dz)^T a` backwards together with the state and the parameter
//! accumulator `dg/dt = -(df/dphi)^T a`.

mod adjoint;
mod field;
mod solver;

pub use adjoint::{adjoint_gradient, AdjointResult};
pub use field::{LinearField, MlpField, VectorField};
pub use solver::{integrate, integrate_batch, solve_ivp, Method, Solution, SolveConfig, SolveStats};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },
    #[error("step size underflow at t = {t} (h = {h:e}) after {steps} steps; problem appears stiff")]
    StepUnderflow { t: f64, h: f64, steps: usize },
    #[error("step budget of {max_steps} exhausted at t = {t}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("backward solve failed ({source}); forward stats: {forward:?}")]
    Backward {
        source: Box<NodeError>,
        forward: SolveStats,
    },
}

pub type Result<T> = std::result::Result<T, NodeError>;
