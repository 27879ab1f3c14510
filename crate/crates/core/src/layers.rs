//! Building blocks shared by the adapter and the encoder: affine maps,
//! layer normalization and GELU, each with an input/parameter backward pass.

use crate::numerics::{axpy, Matrix, Rng, Vector};
use crate::tensors::{join, ParamSet};

/// `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Matrix::zeros(outputs, inputs),
            bias: Vector::zeros(outputs),
        }
    }

    pub fn gaussian(inputs: usize, outputs: usize, stddev: f64, rng: &mut Rng) -> Self {
        Linear {
            weight: Matrix::gaussian(outputs, inputs, stddev, rng),
            bias: Vector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        self.weight.matvec_into(x, out);
        axpy(1.0, &self.bias, out);
    }

    pub fn forward(&self, x: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.outputs());
        self.forward_into(x, &mut out);
        out
    }

    /// `dx += Wᵀ dy`.
    pub fn backward_input(&self, dy: &[f64], dx: &mut [f64]) {
        self.weight.matvec_t_acc(dy, dx);
    }

    /// `grad.W += dy xᵀ`, `grad.b += dy`.
    pub fn backward_params(&self, x: &[f64], dy: &[f64], grad: &mut Linear) {
        grad.weight.add_outer(1.0, dy, x);
        axpy(1.0, dy, &mut grad.bias);
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.weight.visit(&join(prefix, "weight"), f);
        self.bias.visit(&join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.weight.visit_mut(&join(prefix, "weight"), f);
        self.bias.visit_mut(&join(prefix, "bias"), f);
    }
}

/// Layer normalization over one vector with a learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vector,
    pub bias: Vector,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// What [`LayerNorm::backward`] needs from the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    pub normalized: Vector,
    pub rstd: f64,
}

impl LayerNorm {
    /// Unit gain, zero bias.
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            gain: Vector::filled(d, 1.0),
            bias: Vector::zeros(d),
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vector, NormCache) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let normalized: Vector = x.iter().map(|v| (v - mean) * rstd).collect::<Vec<_>>().into();
        let out: Vector = normalized
            .iter()
            .zip(self.gain.iter().zip(self.bias.iter()))
            .map(|(z, (g, b))| z * g + b)
            .collect::<Vec<_>>()
            .into();
        (out, NormCache { normalized, rstd })
    }

    /// Returns the input gradient. Parameter gradients go to `grad` when
    /// given.
    pub fn backward(&self, cache: &NormCache, dy: &[f64], grad: Option<&mut LayerNorm>) -> Vector {
        let n = dy.len() as f64;
        if let Some(grad) = grad {
            for i in 0..dy.len() {
                grad.gain[i] += dy[i] * cache.normalized[i];
                grad.bias[i] += dy[i];
            }
        }
        let dz: Vec<f64> = dy.iter().zip(self.gain.iter()).map(|(d, g)| d * g).collect();
        let mean_dz = dz.iter().sum::<f64>() / n;
        let mean_dz_z = dz.iter().zip(cache.normalized.iter()).map(|(d, z)| d * z).sum::<f64>() / n;
        dz.iter()
            .zip(cache.normalized.iter())
            .map(|(d, z)| cache.rstd * (d - mean_dz - z * mean_dz_z))
            .collect::<Vec<_>>()
            .into()
    }
}

impl ParamSet for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.gain.visit(&join(prefix, "gain"), f);
        self.bias.visit(&join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.gain.visit_mut(&join(prefix, "gain"), f);
        self.bias.visit_mut(&join(prefix, "bias"), f);
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}
