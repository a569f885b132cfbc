use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{NodeError, Result};

/// A parametric vector field `f(z, t; phi)` with vector-Jacobian products.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn n_params(&self) -> usize;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    fn eval(&self, z: &DVector<f64>, t: f64) -> DVector<f64>;

    /// Returns `(a^T df/dz, a^T df/dphi)` evaluated at `(z, t)`.
    fn vjp(&self, z: &DVector<f64>, t: f64, a: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
}

/// Linear field `f(z) = A z`. Parameters are the entries of `A` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearField {
    pub a: DMatrix<f64>,
}

impl LinearField {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(NodeError::DimensionMismatch {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        Ok(Self { a })
    }

    pub fn zero(m: usize) -> Self {
        Self {
            a: DMatrix::zeros(m, m),
        }
    }

    pub fn identity(m: usize) -> Self {
        Self {
            a: DMatrix::identity(m, m),
        }
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn n_params(&self) -> usize {
        self.a.len()
    }

    fn params(&self) -> Vec<f64> {
        let m = self.dim();
        (0..m * m).map(|k| self.a[(k / m, k % m)]).collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let m = self.dim();
        if params.len() != m * m {
            return Err(NodeError::DimensionMismatch {
                expected: m * m,
                got: params.len(),
            });
        }
        for (k, p) in params.iter().enumerate() {
            self.a[(k / m, k % m)] = *p;
        }
        Ok(())
    }

    fn eval(&self, z: &DVector<f64>, _t: f64) -> DVector<f64> {
        &self.a * z
    }

    fn vjp(&self, z: &DVector<f64>, _t: f64, a: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.dim();
        let gz = self.a.tr_mul(a);
        let mut gp = DVector::zeros(m * m);
        for i in 0..m {
            for j in 0..m {
                gp[i * m + j] = a[i] * z[j];
            }
        }
        (gz, gp)
    }
}

const LN_EPS: f64 = 1e-5;

/// Compact two-layer map `f(z, t) = W2 tanh(norm(W1 [z; t] + b1)) + b2`.
///
/// Time enters as an extra input coordinate. `norm` is an optional
/// parameter-free layer normalization over the hidden units. Weights are
/// clamped to `[-weight_bound, weight_bound]`, which keeps the field globally
/// Lipschitz in `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpField {
    m: usize,
    hidden: usize,
    layer_norm: bool,
    weight_bound: f64,
    // w1: hidden x (m + 1), b1: hidden, w2: m x hidden, b2: m (flattened row-major)
    params: Vec<f64>,
}

impl MlpField {
    pub fn n_params_for(m: usize, hidden: usize) -> usize {
        hidden * (m + 1) + hidden + m * hidden + m
    }

    pub fn random<R: Rng + ?Sized>(
        m: usize,
        hidden: usize,
        scale: f64,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, scale.max(0.0)).expect("finite scale");
        let weight_bound = 4.0;
        let params = (0..Self::n_params_for(m, hidden))
            .map(|_| normal.sample(rng).clamp(-weight_bound, weight_bound))
            .collect();
        Self {
            m,
            hidden,
            layer_norm,
            weight_bound,
            params,
        }
    }

    /// A field with all parameters zero, i.e. `f == 0`.
    pub fn zeros(m: usize, hidden: usize, layer_norm: bool) -> Self {
        Self {
            m,
            hidden,
            layer_norm,
            weight_bound: 4.0,
            params: vec![0.0; Self::n_params_for(m, hidden)],
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layer_norm(&self) -> bool {
        self.layer_norm
    }

    fn w1(&self, i: usize, j: usize) -> f64 {
        self.params[i * (self.m + 1) + j]
    }

    fn b1_offset(&self) -> usize {
        self.hidden * (self.m + 1)
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.m * self.hidden
    }

    fn w2(&self, i: usize, j: usize) -> f64 {
        self.params[self.w2_offset() + i * self.hidden + j]
    }

    fn input(&self, z: &DVector<f64>, t: f64) -> Vec<f64> {
        let mut x: Vec<f64> = z.iter().copied().collect();
        x.push(t);
        x
    }

    /// Hidden pre-activation, its normalized form and the tanh output.
    fn hidden_forward(&self, x: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
        let b1 = self.b1_offset();
        let mut u: Vec<f64> = (0..self.hidden)
            .map(|i| {
                let mut s = self.params[b1 + i];
                for (j, xj) in x.iter().enumerate() {
                    s += self.w1(i, j) * xj;
                }
                s
            })
            .collect();
        let mut sigma = 1.0;
        if self.layer_norm {
            let n = self.hidden as f64;
            let mean = u.iter().sum::<f64>() / n;
            let var = u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            sigma = (var + LN_EPS).sqrt();
            for v in u.iter_mut() {
                *v = (*v - mean) / sigma;
            }
        }
        let h = u.iter().map(|v| v.tanh()).collect();
        (u, sigma, h)
    }
}

impl VectorField for MlpField {
    fn dim(&self) -> usize {
        self.m
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NodeError::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NodeError::NonFinite { t: f64::NAN });
        }
        let bound = self.weight_bound;
        for (dst, src) in self.params.iter_mut().zip(params) {
            *dst = src.clamp(-bound, bound);
        }
        Ok(())
    }

    fn eval(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        let x = self.input(z, t);
        let (_, _, h) = self.hidden_forward(&x);
        let b2 = self.b2_offset();
        DVector::from_fn(self.m, |i, _| {
            let mut s = self.params[b2 + i];
            for (j, hj) in h.iter().enumerate() {
                s += self.w2(i, j) * hj;
            }
            s
        })
    }

    fn vjp(&self, z: &DVector<f64>, t: f64, a: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let x = self.input(z, t);
        let (n, sigma, h) = self.hidden_forward(&x);
        let mut gp = DVector::zeros(self.params.len());

        let w2o = self.w2_offset();
        let b2o = self.b2_offset();
        for i in 0..self.m {
            gp[b2o + i] = a[i];
            for j in 0..self.hidden {
                gp[w2o + i * self.hidden + j] = a[i] * h[j];
            }
        }
        // back through tanh
        let gn: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let gh: f64 = (0..self.m).map(|i| self.w2(i, j) * a[i]).sum();
                gh * (1.0 - h[j] * h[j])
            })
            .collect();
        let gu: Vec<f64> = if self.layer_norm {
            let k = self.hidden as f64;
            let mean_g = gn.iter().sum::<f64>() / k;
            let mean_gn = gn.iter().zip(&n).map(|(g, v)| g * v).sum::<f64>() / k;
            gn.iter()
                .zip(&n)
                .map(|(g, v)| (g - mean_g - v * mean_gn) / sigma)
                .collect()
        } else {
            gn
        };
        let b1o = self.b1_offset();
        let mut gz = DVector::zeros(self.m);
        for (i, gui) in gu.iter().enumerate() {
            gp[b1o + i] = *gui;
            for (j, xj) in x.iter().enumerate() {
                gp[i * (self.m + 1) + j] = gui * xj;
                if j < self.m {
                    gz[j] += self.w1(i, j) * gui;
                }
            }
        }
        (gz, gp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(field: &mut dyn VectorField, z: &DVector<f64>, t: f64, a: &DVector<f64>) {
        let (gz, gp) = field.vjp(z, t, a);
        let h = 1e-6;
        for j in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let d = (field.eval(&zp, t) - field.eval(&zm, t)).dot(a) / (2.0 * h);
            assert!((d - gz[j]).abs() < 1e-7, "dz[{j}]: fd {d} vs {}", gz[j]);
        }
        let p0 = field.params();
        for k in 0..p0.len() {
            let mut pp = p0.clone();
            let mut pm = p0.clone();
            pp[k] += h;
            pm[k] -= h;
            field.set_params(&pp).unwrap();
            let fp = field.eval(z, t);
            field.set_params(&pm).unwrap();
            let fm = field.eval(z, t);
            let d = (fp - fm).dot(a) / (2.0 * h);
            assert!((d - gp[k]).abs() < 1e-7, "dphi[{k}]: fd {d} vs {}", gp[k]);
        }
        field.set_params(&p0).unwrap();
    }

    #[test]
    fn mlp_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &ln in &[false, true] {
            let mut f = MlpField::random(3, 5, 0.7, ln, &mut rng);
            let z = DVector::from_vec(vec![0.3, -0.8, 1.1]);
            let a = DVector::from_vec(vec![0.5, 1.5, -0.2]);
            fd_check(&mut f, &z, 0.4, &a);
        }
    }

    #[test]
    fn linear_vjp_matches_finite_differences() {
        let mut f = LinearField::new(DMatrix::from_row_slice(2, 2, &[0.1, -2.0, 0.7, 0.3])).unwrap();
        let z = DVector::from_vec(vec![1.0, 2.0]);
        let a = DVector::from_vec(vec![-0.3, 0.9]);
        fd_check(&mut f, &z, 0.0, &a);
    }

    #[test]
    fn zero_field_is_zero() {
        let f = MlpField::zeros(4, 3, false);
        let z = DVector::from_element(4, 2.5);
        assert_eq!(f.eval(&z, 1.0), DVector::zeros(4));
    }

    #[test]
    fn weights_are_clamped() {
        let mut f = MlpField::zeros(2, 2, false);
        let big = vec![100.0; f.n_params()];
        f.set_params(&big).unwrap();
        assert!(f.params().iter().all(|p| *p <= 4.0));
    }
}
