use nalgebra::DVector;

use crate::{integrate, solve_ivp, NodeError, Result, SolveConfig, SolveStats, VectorField};

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult {
    pub z1: DVector<f64>,
    pub dl_dz0: DVector<f64>,
    pub dl_dparams: DVector<f64>,
    pub forward: SolveStats,
    pub backward: SolveStats,
}

/// Gradients of a terminal loss `L(z(t1))` with respect to the initial state
/// and the field parameters.
///
/// `loss_grad` maps the terminal state to `dL/dz(t1)`. The backward pass
/// integrates the augmented state `[z, a, g]` from `t1` to `t0` with
/// `dz/dt = f`, `da/dt = -a^T df/dz`, `dg/dt = -a^T df/dphi`, starting from
/// `[z(t1), dL/dz(t1), 0]`.
pub fn adjoint_gradient<F, G>(
    field: &F,
    z0: &DVector<f64>,
    cfg: &SolveConfig,
    loss_grad: G,
) -> Result<AdjointResult>
where
    F: VectorField + ?Sized,
    G: FnOnce(&DVector<f64>) -> DVector<f64>,
{
    let forward = integrate(field, z0, cfg)?;
    let m = field.dim();
    let p = field.n_params();
    let a1 = loss_grad(&forward.z1);
    if a1.len() != m {
        return Err(NodeError::DimensionMismatch {
            expected: m,
            got: a1.len(),
        });
    }

    let mut aug = DVector::zeros(2 * m + p);
    aug.rows_mut(0, m).copy_from(&forward.z1);
    aug.rows_mut(m, m).copy_from(&a1);

    let rhs = |t: f64, s: &DVector<f64>| {
        let z = s.rows(0, m).into_owned();
        let a = s.rows(m, m).into_owned();
        let (gz, gp) = field.vjp(&z, t, &a);
        let mut out = DVector::zeros(2 * m + p);
        out.rows_mut(0, m).copy_from(&field.eval(&z, t));
        out.rows_mut(m, m).copy_from(&(-gz));
        out.rows_mut(2 * m, p).copy_from(&(-gp));
        out
    };
    let (s0, backward) = solve_ivp(rhs, &aug, cfg.t1, cfg.t0, cfg).map_err(|e| {
        NodeError::Backward {
            source: Box::new(e),
            forward: forward.stats.clone(),
        }
    })?;

    Ok(AdjointResult {
        z1: forward.z1,
        dl_dz0: s0.rows(m, m).into_owned(),
        dl_dparams: s0.rows(2 * m, p).into_owned(),
        forward: forward.stats,
        backward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{LinearField, MlpField};
    use nalgebra::DMatrix;

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let f = MlpField::random(3, 4, 0.5, false, &mut rng);
        let z0 = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let res = adjoint_gradient(&f, &z0, &SolveConfig::default(), |_| DVector::zeros(3)).unwrap();
        assert!(res.dl_dz0.iter().all(|v| *v == 0.0));
        assert!(res.dl_dparams.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_adjoint_matches_transposed_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 1.2, -0.7, 0.1]);
        let f = LinearField::new(a.clone()).unwrap();
        let z0 = DVector::from_vec(vec![0.4, -1.0]);
        let target = DVector::from_vec(vec![1.0, 2.0]);
        let cfg = SolveConfig::adaptive(0.0, 1.5, 1e-10, 1e-12);
        let res = adjoint_gradient(&f, &z0, &cfg, |z| z - &target).unwrap();
        let expm = (&a * 1.5).exp();
        let z1 = &expm * &z0;
        let expected = expm.transpose() * (z1 - &target);
        assert!((res.dl_dz0 - expected).amax() < 1e-5);
    }

    #[test]
    fn wrong_loss_gradient_length_is_rejected() {
        let f = LinearField::identity(2);
        let z0 = DVector::zeros(2);
        let err = adjoint_gradient(&f, &z0, &SolveConfig::default(), |_| DVector::zeros(3));
        assert!(matches!(err, Err(NodeError::DimensionMismatch { .. })));
    }
}
