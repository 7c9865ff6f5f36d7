//! Forward/backward primitives for the fixed MLP topology: affine layers,
//! ReLU, the MSE reconstruction term, the Gaussian KL term and the
//! reparameterization trick. Each backward pass is written out by hand.

use crate::error::{Error, Result};

use super::{Matrix, RngStream};

/// Lower/upper bounds applied to log-variances before exponentiation.
pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Fully connected layer `y = x Wᵀ + b` with gradient accumulators.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Matrix,
    bias: Vec<f64>,
    grad_weight: Matrix,
    grad_bias: Vec<f64>,
    input_cache: Option<Matrix>,
}

impl Linear {
    /// Uniform init in ±√(6/(fan_in+fan_out)), zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut weight = Matrix::zeros(out_dim, in_dim);
        for w in weight.as_mut_slice() {
            *w = rng.uniform(-bound, bound);
        }
        Linear::from_parts(weight, vec![0.0; out_dim]).expect("shapes are consistent")
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Dimension {
                context: "Linear bias",
                expected: weight.rows(),
                actual: bias.len(),
            });
        }
        Ok(Linear {
            grad_weight: Matrix::zeros(weight.rows(), weight.cols()),
            grad_bias: vec![0.0; bias.len()],
            weight,
            bias,
            input_cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn grad_weight(&self) -> &Matrix {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &[f64] {
        &self.grad_bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Forward pass without touching the cache; safe on shared layers.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::Dimension {
                context: "Linear::forward input",
                expected: self.in_dim(),
                actual: x.cols(),
            });
        }
        let mut y = x.matmul_t(&self.weight)?;
        let out = self.out_dim();
        for row in y.as_mut_slice().chunks_exact_mut(out.max(1)) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Forward pass that remembers `x` for [`Linear::backward`].
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = self.apply(x)?;
        self.input_cache = Some(x.clone());
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the gradient wrt the input.
    /// Consumes the cached input.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let x = self.input_cache.take().ok_or(Error::State(
            "Linear::backward called without a preceding forward",
        ))?;
        if upstream.rows() != x.rows() || upstream.cols() != self.out_dim() {
            let (expected, actual) = if upstream.rows() != x.rows() {
                (x.rows(), upstream.rows())
            } else {
                (self.out_dim(), upstream.cols())
            };
            return Err(Error::Dimension {
                context: "Linear::backward upstream",
                expected,
                actual,
            });
        }
        let gw = upstream.t_matmul(&x)?;
        for (g, d) in self
            .grad_weight
            .as_mut_slice()
            .iter_mut()
            .zip(gw.as_slice())
        {
            *g += d;
        }
        for row in upstream.iter_rows() {
            for (g, d) in self.grad_bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        upstream.matmul(&self.weight)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.as_mut_slice().fill(0.0);
        self.grad_bias.fill(0.0);
    }

    /// `(parameter, gradient)` slices in a fixed order: weight, then bias.
    pub fn params_and_grads(&mut self) -> [(&mut [f64], &[f64]); 2] {
        [
            (self.weight.as_mut_slice(), self.grad_weight.as_slice()),
            (&mut self.bias[..], &self.grad_bias[..]),
        ]
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given the pre-activation `x`: upstream masked where x ≤ 0.
pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    x.zip_map(upstream, |xv, g| if xv > 0.0 { g } else { 0.0 })
}

/// Mean over every entry of `(x − x̂)²`, with its gradient wrt `x̂`.
pub fn mse_loss(x: &Matrix, x_hat: &Matrix) -> Result<(f64, Matrix)> {
    x.expect_shape("mse_loss", x_hat)?;
    let n = x.as_slice().len();
    if n == 0 {
        return Err(Error::Empty("mse_loss"));
    }
    let nf = n as f64;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(x_hat.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let grad = x.zip_map(x_hat, |a, b| 2.0 * (b - a) / nf)?;
    Ok((sum / nf, grad))
}

/// KL divergence from `N(mu, exp(logvar))` to `N(0, I)`, summed over latent
/// dimensions and averaged over the batch.
#[derive(Debug, Clone)]
pub struct KlTerm {
    pub value: f64,
    pub grad_mu: Matrix,
    pub grad_logvar: Matrix,
}

pub fn gaussian_kl(mu: &Matrix, logvar: &Matrix) -> Result<KlTerm> {
    mu.expect_shape("gaussian_kl", logvar)?;
    if mu.rows() == 0 {
        return Err(Error::Empty("gaussian_kl"));
    }
    let scale = 1.0 / mu.rows() as f64;
    let mut sum = 0.0;
    let mut grad_mu = Matrix::zeros(mu.rows(), mu.cols());
    let mut grad_logvar = Matrix::zeros(mu.rows(), mu.cols());
    for (i, (&m, &lv)) in mu.as_slice().iter().zip(logvar.as_slice()).enumerate() {
        let var = lv.exp();
        if !var.is_finite() {
            return Err(Error::Numeric(format!(
                "gaussian_kl: exp(logvar) overflowed for logvar = {lv}"
            )));
        }
        sum += 1.0 + lv - m * m - var;
        grad_mu.as_mut_slice()[i] = m * scale;
        grad_logvar.as_mut_slice()[i] = -0.5 * (1.0 - var) * scale;
    }
    Ok(KlTerm {
        value: -0.5 * sum * scale,
        grad_mu,
        grad_logvar,
    })
}

/// A reparameterized sample `z = mu + exp(logvar/2) ⊙ eps`, keeping `eps`
/// for the backward pass.
#[derive(Debug, Clone)]
pub struct Reparameterized {
    pub z: Matrix,
    pub eps: Matrix,
}

pub fn reparameterize(
    mu: &Matrix,
    logvar: &Matrix,
    rng: &mut RngStream,
) -> Result<Reparameterized> {
    mu.expect_shape("reparameterize", logvar)?;
    let eps = rng.normal_matrix(mu.rows(), mu.cols());
    reparameterize_with_noise(mu, logvar, eps)
}

pub fn reparameterize_with_noise(
    mu: &Matrix,
    logvar: &Matrix,
    eps: Matrix,
) -> Result<Reparameterized> {
    mu.expect_shape("reparameterize", logvar)?;
    mu.expect_shape("reparameterize noise", &eps)?;
    let mut z = Matrix::zeros(mu.rows(), mu.cols());
    for (i, out) in z.as_mut_slice().iter_mut().enumerate() {
        let std = (0.5 * logvar.as_slice()[i]).exp();
        *out = mu.as_slice()[i] + std * eps.as_slice()[i];
    }
    Ok(Reparameterized { z, eps })
}

/// Splits the gradient wrt `z` into gradients wrt `mu` and `logvar`.
pub fn reparameterize_backward(
    upstream: &Matrix,
    logvar: &Matrix,
    eps: &Matrix,
) -> Result<(Matrix, Matrix)> {
    upstream.expect_shape("reparameterize_backward", logvar)?;
    upstream.expect_shape("reparameterize_backward", eps)?;
    let mut grad_logvar = Matrix::zeros(upstream.rows(), upstream.cols());
    for (i, g) in grad_logvar.as_mut_slice().iter_mut().enumerate() {
        let std = (0.5 * logvar.as_slice()[i]).exp();
        *g = upstream.as_slice()[i] * 0.5 * std * eps.as_slice()[i];
    }
    Ok((upstream.clone(), grad_logvar))
}

/// Clamps log-variances into `[LOGVAR_MIN, LOGVAR_MAX]`.
pub fn clamp_logvar(raw: &Matrix) -> Matrix {
    raw.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
}

/// Passes gradient through the clamp only where the raw value was in range.
pub fn clamp_logvar_backward(raw: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    raw.zip_map(upstream, |r, g| {
        if (LOGVAR_MIN..=LOGVAR_MAX).contains(&r) {
            g
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: Vec<f64>, out: usize, inp: usize, b: Vec<f64>) -> Linear {
        Linear::from_parts(Matrix::from_vec(out, inp, w).unwrap(), b).unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut l = Linear::from_parts(Matrix::identity(3), vec![0.0; 3]).unwrap();
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        assert_eq!(l.forward(&x).unwrap(), x);
        let up = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(l.backward(&up).unwrap(), up);
    }

    #[test]
    fn output_shape_follows_layer_width() {
        let mut rng = RngStream::new(3);
        let l = Linear::new(2, 3, &mut rng);
        let y = l
            .apply(&Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(y.shape(), (1, 3));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = RngStream::new(3);
        let l = Linear::new(100, 50, &mut rng);
        let bound = (6.0f64 / 150.0).sqrt();
        assert!(l.weight().as_slice().iter().all(|w| w.abs() <= bound));
        assert!(l.bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut l = layer(vec![1.0, 2.0, 3.0, 4.0], 2, 2, vec![0.5, -0.5]);
        l.forward(&Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap())
            .unwrap();
        let gx = l.backward(&Matrix::zeros(1, 2)).unwrap();
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
        assert!(l.grad_weight().as_slice().iter().all(|&v| v == 0.0));
        assert!(l.grad_bias().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let mut l = layer(vec![1.0], 1, 1, vec![0.0]);
        assert!(matches!(
            l.backward(&Matrix::zeros(1, 1)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut l = layer(vec![1.0, 1.0], 1, 2, vec![0.0]);
        assert!(matches!(
            l.forward(&Matrix::zeros(1, 3)),
            Err(Error::Dimension {
                expected: 2,
                actual: 3,
                ..
            })
        ));
    }

    #[test]
    fn relu_values_and_mask() {
        let x = Matrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).as_slice(), &[0.0, 0.0, 2.0]);
        let up = Matrix::from_vec(1, 3, vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &up).unwrap().as_slice(), &[0.0, 0.0, 5.0]);
        let pos = Matrix::from_vec(1, 2, vec![0.1, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn mse_direct_values() {
        let x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let xh = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let (l, g) = mse_loss(&x, &xh).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.as_slice(), &[4.0]);
        let (l, g) = mse_loss(&xh, &xh).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.as_slice(), &[0.0]);
        assert!(mse_loss(&x, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn kl_known_values() {
        let z = Matrix::zeros(3, 4);
        assert_eq!(gaussian_kl(&z, &z).unwrap().value, 0.0);
        let mu = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let lv = Matrix::zeros(1, 1);
        assert_eq!(gaussian_kl(&mu, &lv).unwrap().value, 0.5);
        let huge = Matrix::from_vec(1, 1, vec![800.0]).unwrap();
        assert!(matches!(gaussian_kl(&lv, &huge), Err(Error::Numeric(_))));
    }

    #[test]
    fn reparameterize_zero_variance_and_determinism() {
        let mu = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let lv = Matrix::from_vec(2, 2, vec![-60.0; 4]).unwrap();
        let r = reparameterize(&mu, &lv, &mut RngStream::new(9)).unwrap();
        for (z, m) in r.z.as_slice().iter().zip(mu.as_slice()) {
            assert!((z - m).abs() < 1e-10);
        }
        let lv0 = Matrix::zeros(2, 2);
        let a = reparameterize(&mu, &lv0, &mut RngStream::new(9)).unwrap();
        let b = reparameterize(&mu, &lv0, &mut RngStream::new(9)).unwrap();
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn reparameterize_moments() {
        let n = 100_000;
        let mu = Matrix::zeros(n, 1);
        let r = reparameterize(&mu, &mu, &mut RngStream::new(2024)).unwrap();
        let mean = r.z.as_slice().iter().sum::<f64>() / n as f64;
        let var =
            r.z.as_slice()
                .iter()
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let raw = Matrix::from_vec(1, 3, vec![-30.0, 0.0, 25.0]).unwrap();
        assert_eq!(clamp_logvar(&raw).as_slice(), &[-20.0, 0.0, 20.0]);
        let g =
            clamp_logvar_backward(&raw, &Matrix::from_vec(1, 3, vec![1.0; 3]).unwrap()).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 1.0, 0.0]);
    }
}
