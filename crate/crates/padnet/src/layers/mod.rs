//! Network layers. Static building blocks live here; the two fully dynamic
//! layers get their own files.

mod dyconv;
mod moe;

pub use dyconv::DyConvLayer;
pub use moe::MoELayer;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PadError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamId, ParamSet};
use crate::tensor::{Float, Tensor};

/// Gaussian init with the given standard deviation.
pub(crate) fn normal_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: Float) -> Tensor {
    let dist = Normal::new(0.0, std as f64).expect("std must be finite");
    let n = crate::tensor::numel(&shape);
    let data = (0..n).map(|_| dist.sample(rng) as Float).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

pub(crate) fn uniform_small(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: Float) -> Tensor {
    let n = crate::tensor::numel(&shape);
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as Float).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Softmax temperature annealed linearly from `tau_start` at epoch 0 to
/// `tau_end` at `anneal_epochs`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperaturePlan {
    pub tau_start: Float,
    pub tau_end: Float,
    pub anneal_epochs: usize,
}

impl TemperaturePlan {
    pub fn new(tau_start: Float, tau_end: Float, anneal_epochs: usize) -> Result<Self> {
        if !(tau_start > 0.0) || !(tau_end > 0.0) || !tau_start.is_finite() || !tau_end.is_finite() {
            return Err(PadError::InvalidArgument(format!(
                "temperatures must be positive and finite, got start {tau_start}, end {tau_end}"
            )));
        }
        Ok(TemperaturePlan { tau_start, tau_end, anneal_epochs })
    }

    /// Constant temperature, no annealing.
    pub fn constant(tau: Float) -> Result<Self> {
        Self::new(tau, tau, 0)
    }

    pub fn tau_at(&self, epoch: usize) -> Float {
        if self.anneal_epochs == 0 || epoch >= self.anneal_epochs {
            return self.tau_end;
        }
        let t = epoch as Float / self.anneal_epochs as Float;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

/// Fully connected layer: `x @ w + b`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn init(name: &str, in_features: usize, out_features: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_features as Float).sqrt();
        let w = params.add(format!("{name}.w"), normal_init(rng, vec![in_features, out_features], std));
        let b = params.add(format!("{name}.b"), Tensor::zeros(vec![out_features]));
        LinearLayer { name: name.to_string(), in_features, out_features, w, b }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, binding: &mut Binding, x: Var) -> Result<Var> {
        let w = binding.bind(g, params, self.w);
        let b = binding.bind(g, params, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Ordinary shared-kernel convolution with channel bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (in_ch * kh * kw) as Float).sqrt();
        let w = params.add(format!("{name}.w"), normal_init(rng, vec![out_ch, in_ch, kh, kw], std));
        let b = params.add(format!("{name}.b"), Tensor::zeros(vec![out_ch]));
        ConvLayer { name: name.to_string(), in_ch, out_ch, kh, kw, stride, pad, w, b }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, binding: &mut Binding, x: Var) -> Result<Var> {
        let w = binding.bind(g, params, self.w);
        let b = binding.bind(g, params, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add_channel_bias(y, b)
    }
}

/// Two-layer feed-forward block `d → h → d` with a relu in the middle; the
/// static counterpart of a mixture of experts.
#[derive(Debug, Clone)]
pub struct FfnLayer {
    pub name: String,
    pub d: usize,
    pub h: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnLayer {
    pub fn init(name: &str, d: usize, h: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let w1 = params.add(format!("{name}.w1"), normal_init(rng, vec![d, h], (2.0 / d as Float).sqrt()));
        let b1 = params.add(format!("{name}.b1"), Tensor::zeros(vec![h]));
        let w2 = params.add(format!("{name}.w2"), normal_init(rng, vec![h, d], (2.0 / h as Float).sqrt()));
        let b2 = params.add(format!("{name}.b2"), Tensor::zeros(vec![d]));
        FfnLayer { name: name.to_string(), d, h, w1, b1, w2, b2 }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, binding: &mut Binding, x: Var) -> Result<Var> {
        let w1 = binding.bind(g, params, self.w1);
        let b1 = binding.bind(g, params, self.b1);
        let w2 = binding.bind(g, params, self.w2);
        let b2 = binding.bind(g, params, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let y = g.matmul(h, w2)?;
        g.add_row(y, b2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_plan_pinned_points() {
        let p = TemperaturePlan::new(30.0, 1.0, 10).unwrap();
        assert_eq!(p.tau_at(0), 30.0);
        assert!((p.tau_at(5) - 15.5).abs() <= 1e-12);
        assert_eq!(p.tau_at(10), 1.0);
        assert_eq!(p.tau_at(12), 1.0);
    }

    #[test]
    fn temperature_plan_rejects_nonpositive() {
        assert!(TemperaturePlan::new(0.0, 1.0, 5).is_err());
        assert!(TemperaturePlan::new(30.0, -1.0, 5).is_err());
    }

    #[test]
    fn zero_anneal_window_is_constant() {
        let p = TemperaturePlan::new(30.0, 4.0, 0).unwrap();
        assert_eq!(p.tau_at(0), 4.0);
        assert_eq!(p.tau_at(100), 4.0);
    }
}
