//! A small, dependency-free neural toolkit: tanh MLPs with exact
//! backpropagation, a diagonal-Gaussian policy head and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(2 pi) / 2`.
const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Fully connected network: tanh on hidden layers, linear output.
///
/// All weights and biases live in one flat vector so optimizers and
/// checkpoints can treat them uniformly. Layer `l` stores its
/// `out x in` weights row-major followed by its `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Layer inputs and outputs recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache has at least the input")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero network with the given layer widths (input first).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Mlp::zeros(sizes);
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-limit..=limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: params.len(),
            });
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    /// Multiplies the output layer's weights by `factor`.
    pub fn scale_output_layer(mut self, factor: f64) -> Self {
        let (offset, fan_in, fan_out) = self.layer(self.layers() - 1);
        for p in &mut self.params[offset..offset + fan_in * fan_out] {
            *p *= factor;
        }
        self
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(offset, fan_in, fan_out)` of layer `l`.
    fn layer(&self, l: usize) -> (usize, usize, usize) {
        let offset = param_count(&self.sizes[..=l]);
        (offset, self.sizes[l], self.sizes[l + 1])
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &[f64], last: bool) -> Vec<f64> {
        let (offset, fan_in, fan_out) = self.layer(l);
        let weights = &self.params[offset..offset + fan_in * fan_out];
        let biases = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        weights
            .chunks_exact(fan_in)
            .zip(biases)
            .map(|(row, b)| {
                let z = b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
                if last {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let last = self.layers() - 1;
        let mut x = input.to_vec();
        for l in 0..self.layers() {
            x = self.affine(l, &x, l == last);
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        self.check_input(input)?;
        let last = self.layers() - 1;
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(input.to_vec());
        for l in 0..self.layers() {
            let next = self.affine(l, &activations[l], l == last);
            activations.push(next);
        }
        Ok(ForwardCache { activations })
    }

    /// Adds `d loss / d params` to `grads` given `d loss / d output`, and
    /// returns `d loss / d input`.
    pub fn accumulate_backward(&self, cache: &ForwardCache, output_gradient: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        assert_eq!(output_gradient.len(), self.output_dim(), "output gradient size");
        let mut delta = output_gradient.to_vec();
        for l in (0..self.layers()).rev() {
            let (offset, fan_in, fan_out) = self.layer(l);
            let x = &cache.activations[l];
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let (gw, gb) = grads[offset..offset + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            let mut dx = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    grow[i] += d * x[i];
                    dx[i] += d * row[i];
                }
            }
            if l > 0 {
                // x is a tanh output: d tanh = 1 - y^2.
                for (d, y) in dx.iter_mut().zip(x) {
                    *d *= 1.0 - y * y;
                }
            }
            delta = dx;
        }
        delta
    }

    /// Parameter gradient of a scalar loss whose gradient with respect to the
    /// network output is `output_gradient`.
    pub fn backward(&self, cache: &ForwardCache, output_gradient: &[f64]) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        self.accumulate_backward(cache, output_gradient, &mut grads);
        grads
    }
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&mu, &ls), &a)| {
            let z = (a - mu) * (-ls).exp();
            -ls - HALF_LN_TAU - 0.5 * z * z
        })
        .sum()
}

/// Entropy of a diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + HALF_LN_TAU).sum()
}

/// Diagonal-Gaussian policy: an MLP produces the mean, a free vector holds
/// the log standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(mean: Mlp, initial_log_std: f64) -> Self {
        let dim = mean.output_dim();
        let mut policy = GaussianPolicy {
            mean,
            log_std: vec![initial_log_std; dim],
        };
        policy.clamp_log_std();
        policy
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn clamp_log_std(&mut self) {
        for ls in &mut self.log_std {
            *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        if action.len() != self.action_dim() {
            return Err(Error::Shape {
                expected: self.action_dim(),
                actual: action.len(),
            });
        }
        let mu = self.mean.forward(state)?;
        Ok(gaussian_log_prob(&mu, &self.log_std, action))
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.log_std)
    }

    /// Draws `mu + sigma * eps` and returns it with its log-probability.
    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mu = self.mean.forward(state)?;
        let action: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                m + ls.exp() * eps
            })
            .collect();
        let lp = gaussian_log_prob(&mu, &self.log_std, &action);
        Ok((action, lp))
    }

    /// Gradients of `log pi(a|s)` with respect to the mean and the log-std.
    pub fn log_prob_gradients(mean: &[f64], log_std: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut d_mean = Vec::with_capacity(mean.len());
        let mut d_log_std = Vec::with_capacity(mean.len());
        for ((&mu, &ls), &a) in mean.iter().zip(log_std).zip(action) {
            let inv_var = (-2.0 * ls).exp();
            let diff = a - mu;
            d_mean.push(diff * inv_var);
            d_log_std.push(diff * diff * inv_var - 1.0);
        }
        (d_mean, d_log_std)
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(size: usize, lr: f64) -> Self {
        Adam::with_betas(size, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(size: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; size],
            v: vec![0.0; size],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update; gradients are for a loss to minimize.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size");
        assert_eq!(grads.len(), self.m.len(), "gradient size");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grads` in place so their Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
