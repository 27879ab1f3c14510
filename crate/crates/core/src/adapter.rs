//! Bottleneck adapter baseline.
//!
//! `y = LayerNorm(x + W_up · gelu(W_down · x + b_down) + b_up)`. One adapter
//! per encoder layer is the single-adapter configuration; two stacked
//! adapters give the double configuration with exactly twice the
//! parameters. The normalization sits after the residual add.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{gelu, gelu_grad, LayerNorm, Linear, NormCache};
use crate::numerics::{axpy, Rng, Vector};
use crate::tensors::{join, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d: usize,
    pub bottleneck: usize,
}

impl AdapterConfig {
    pub const DEFAULT_BOTTLENECK: usize = 64;

    pub fn with_dim(d: usize) -> Self {
        AdapterConfig {
            d,
            bottleneck: Self::DEFAULT_BOTTLENECK,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 || self.d == 0 {
            return Err(Error::Config(format!(
                "adapter needs d >= 1 and bottleneck >= 1, got d = {}, bottleneck = {}",
                self.d, self.bottleneck
            )));
        }
        Ok(())
    }

    /// `2·d·b + b + d + 2·d`.
    pub fn num_params(&self) -> usize {
        2 * self.d * self.bottleneck + self.bottleneck + self.d + 2 * self.d
    }

    pub fn macs_per_position(&self) -> u64 {
        (2 * self.d * self.bottleneck) as u64
    }

    /// Elementwise work of the trailing normalization: mean, variance,
    /// scaling and the affine map.
    pub fn norm_ops_per_position(&self) -> u64 {
        (4 * self.d) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    config: AdapterConfig,
    /// `b × d` projection plus its `b` bias.
    pub down: Linear,
    /// `d × b` projection plus its `d` bias.
    pub up: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterTrace {
    pub input: Vector,
    pub pre_activation: Vector,
    pub activation: Vector,
    pub norm: NormCache,
    pub output: Vector,
}

impl AdapterParams {
    pub fn zeros(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdapterParams {
            config,
            down: Linear::zeros(config.d, config.bottleneck),
            up: Linear::zeros(config.bottleneck, config.d),
            norm: LayerNorm {
                gain: Vector::zeros(config.d),
                bias: Vector::zeros(config.d),
            },
        })
    }

    /// Down-projection drawn from `N(0, 1/d)`, zero up-projection and unit
    /// normalization gain.
    pub fn init(config: AdapterConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(AdapterParams {
            config,
            down: Linear::gaussian(config.d, config.bottleneck, 1.0 / (config.d as f64).sqrt(), rng),
            up: Linear::zeros(config.bottleneck, config.d),
            norm: LayerNorm::identity(config.d),
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, AdapterTrace)> {
        if x.len() != self.config.d {
            return Err(Error::shape("adapter_forward", self.config.d, x.len()));
        }
        let pre_activation = self.down.forward(x);
        let activation: Vector = pre_activation.iter().map(|&h| gelu(h)).collect::<Vec<_>>().into();
        let mut residual = self.up.forward(&activation);
        axpy(1.0, x, &mut residual);
        let (output, norm) = self.norm.forward(&residual);
        let trace = AdapterTrace {
            input: Vector::from(x),
            pre_activation,
            activation,
            norm,
            output: output.clone(),
        };
        Ok((output, trace))
    }

    /// Forward pass without keeping a trace.
    pub fn infer_into(&self, x: &[f64], out: &mut [f64]) {
        let mut hidden = vec![0.0; self.config.bottleneck];
        self.down.forward_into(x, &mut hidden);
        hidden.iter_mut().for_each(|h| *h = gelu(*h));
        self.up.forward_into(&hidden, out);
        axpy(1.0, x, out);
        let (normed, _) = self.norm.forward(out);
        out.copy_from_slice(&normed);
    }

    /// Adds parameter gradients into `grads` and the input gradient into
    /// `d_input`.
    pub fn backward_accumulate(
        &self,
        trace: &AdapterTrace,
        d_output: &[f64],
        grads: &mut AdapterParams,
        d_input: &mut [f64],
    ) -> Result<()> {
        let (d, b) = (self.config.d, self.config.bottleneck);
        if trace.input.dim() != d || trace.pre_activation.dim() != b || d_output.len() != d {
            return Err(Error::Consistency("adapter trace does not match the layer".into()));
        }
        if grads.config != self.config || d_input.len() != d {
            return Err(Error::Consistency("gradient buffers do not match the adapter".into()));
        }
        let d_residual = self.norm.backward(&trace.norm, d_output, Some(&mut grads.norm));
        axpy(1.0, &d_residual, d_input);

        self.up.backward_params(&trace.activation, &d_residual, &mut grads.up);
        let mut d_act = vec![0.0; b];
        self.up.backward_input(&d_residual, &mut d_act);

        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(trace.pre_activation.iter())
            .map(|(g, &h)| g * gelu_grad(h))
            .collect();
        self.down.backward_params(&trace.input, &d_pre, &mut grads.down);
        self.down.backward_input(&d_pre, d_input);
        Ok(())
    }

    pub fn backward(&self, trace: &AdapterTrace, d_output: &[f64]) -> Result<(AdapterParams, Vector)> {
        let mut grads = AdapterParams::zeros(self.config)?;
        let mut d_input = Vector::zeros(self.config.d);
        self.backward_accumulate(trace, d_output, &mut grads, &mut d_input)?;
        Ok((grads, d_input))
    }
}

impl ParamSet for AdapterParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.down.visit(&join(prefix, "down"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::layers::LAYER_NORM_EPS;
    use crate::numerics::{dot, macs, sample_gaussian, Matrix};

    fn random_adapter(d: usize, b: usize, seed: u64) -> AdapterParams {
        let mut rng = Rng::seed_from_u64(seed);
        let mut a = AdapterParams::init(AdapterConfig { d, bottleneck: b }, &mut rng).unwrap();
        a.visit_mut("", &mut |_, _, data| {
            for v in data.iter_mut() {
                *v += 0.5 * rng.normal();
            }
        });
        a
    }

    #[test]
    fn parameter_count() {
        let c = AdapterConfig::with_dim(768);
        assert_eq!(c.num_params(), 100_672);
        assert_eq!(AdapterParams::zeros(c).unwrap().num_scalars(), 100_672);
    }

    #[test]
    fn zero_up_is_normalized_passthrough() {
        let a = AdapterParams::init(AdapterConfig { d: 6, bottleneck: 3 }, &mut Rng::seed_from_u64(1)).unwrap();
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let (y, _) = a.forward(&x).unwrap();
        let (want, _) = LayerNorm::identity(6).forward(&x);
        assert_eq!(y, want);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let (d, b) = (4, 2);
        let mut a = AdapterParams::zeros(AdapterConfig { d, bottleneck: b }).unwrap();
        a.down.weight = Matrix::from_rows(&[&[0.5, -1.0, 0.25, 0.0], &[1.0, 0.5, -0.5, 2.0]]).unwrap();
        a.down.bias = Vector::from([0.1, -0.2]);
        a.up.weight = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.5], &[0.3, 0.3]]).unwrap();
        a.up.bias = Vector::from([0.0, 0.1, 0.2, 0.3]);
        a.norm.gain = Vector::from([1.0, 2.0, 0.5, 1.5]);
        a.norm.bias = Vector::from([0.0, -1.0, 1.0, 0.0]);
        let x = [0.2, -0.4, 1.0, 0.7];

        let mut h = [0.0; 2];
        for j in 0..b {
            let mut s = a.down.bias[j];
            for i in 0..d {
                s += a.down.weight.get(j, i) * x[i];
            }
            let t = (0.7978845608028654 * (s + 0.044715 * s * s * s)).tanh();
            h[j] = 0.5 * s * (1.0 + t);
        }
        let mut r = [0.0; 4];
        for i in 0..d {
            let mut s = x[i] + a.up.bias[i];
            for j in 0..b {
                s += a.up.weight.get(i, j) * h[j];
            }
            r[i] = s;
        }
        let mean = r.iter().sum::<f64>() / 4.0;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let want: Vec<f64> = (0..d)
            .map(|i| (r[i] - mean) / (var + LAYER_NORM_EPS).sqrt() * a.norm.gain[i] + a.norm.bias[i])
            .collect();

        let (y, _) = a.forward(&x).unwrap();
        for (g, w) in y.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
        let mut fast = vec![0.0; d];
        a.infer_into(&x, &mut fast);
        assert_eq!(fast.as_slice(), y.as_slice());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let a = random_adapter(8, 4, 3);
        let (_, t) = a.forward(&[0.3; 8]).unwrap();
        let (g, dx) = a.backward(&t, &[0.0; 8]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = random_adapter(8, 4, 9);
        let mut rng = Rng::seed_from_u64(10);
        let x = sample_gaussian(&mut rng, 8, 1.0).unwrap();
        let r = sample_gaussian(&mut rng, 8, 1.0).unwrap();
        let (_, t) = a.forward(&x).unwrap();
        let (g, dx) = a.backward(&t, &r).unwrap();

        let theta = a.flatten();
        let fd = central_difference(&theta, 1e-5, |th| {
            let mut q = a.clone();
            let mut off = 0;
            q.visit_mut("", &mut |_, _, data| {
                data.copy_from_slice(&th[off..off + data.len()]);
                off += data.len();
            });
            dot(&q.forward(&x).unwrap().0, &r)
        });
        assert!(max_relative_error(&g.flatten(), &fd) <= 1e-6);
        let fd_x = central_difference(&x, 1e-5, |xv| dot(&a.forward(xv).unwrap().0, &r));
        assert!(max_relative_error(&dx, &fd_x) <= 1e-6);
    }

    #[test]
    fn mac_count() {
        let a = random_adapter(16, 4, 1);
        let (_, n) = macs::measure(|| a.forward(&[0.1; 16]).unwrap());
        assert_eq!(n, a.config().macs_per_position());
        assert_eq!(AdapterConfig::with_dim(768).macs_per_position(), 98_304);
    }

    #[test]
    fn rejects_wrong_dim() {
        let a = random_adapter(4, 2, 1);
        assert!(matches!(a.forward(&[0.0; 3]), Err(Error::Shape { .. })));
    }
}
