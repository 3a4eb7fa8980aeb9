//! Dynamic convolution: `k` parallel kernels mixed per sample by an
//! attention head over globally pooled input features.

use rand_chacha::ChaCha8Rng;

use super::normal_init;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamId, ParamSet};
use crate::tensor::{Float, Tensor};

/// Attention width between the squeeze and the kernel logits.
fn reduce_dim(k: usize, in_ch: usize) -> usize {
    k.max(in_ch / 4)
}

#[derive(Debug, Clone)]
pub struct DyConvLayer {
    pub name: String,
    /// Number of parallel kernels.
    pub k: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[k, m]`, each row one flattened kernel of `m = out_ch·in_ch·kh·kw`.
    pub kernels: ParamId,
    /// `[out_ch]`, shared across kernels.
    pub bias: ParamId,
    pub attn_w1: ParamId,
    pub attn_b1: ParamId,
    pub attn_w2: ParamId,
    pub attn_b2: ParamId,
}

impl DyConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        name: &str,
        k: usize,
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(k >= 1, "dynamic convolution needs at least one kernel");
        let m = out_ch * in_ch * kh * kw;
        let kernel_std = (2.0 / (in_ch * kh * kw) as Float).sqrt();
        let kernels = params.add(format!("{name}.kernels"), normal_init(rng, vec![k, m], kernel_std));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        let r = reduce_dim(k, in_ch);
        let attn_w1 = params.add(format!("{name}.attn.w1"), normal_init(rng, vec![in_ch, r], (2.0 / in_ch as Float).sqrt()));
        let attn_b1 = params.add(format!("{name}.attn.b1"), Tensor::zeros(vec![r]));
        let attn_w2 = params.add(format!("{name}.attn.w2"), normal_init(rng, vec![r, k], (2.0 / r as Float).sqrt()));
        let attn_b2 = params.add(format!("{name}.attn.b2"), Tensor::zeros(vec![k]));
        DyConvLayer {
            name: name.to_string(),
            k,
            in_ch,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            kernels,
            bias,
            attn_w1,
            attn_b1,
            attn_w2,
            attn_b2,
        }
    }

    /// Flattened kernel length `m`.
    pub fn kernel_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    /// Per-sample mixture weights `π(x)` of shape `[b, k]`: global average
    /// pool → squeeze → relu → expand → tempered softmax. Rows sum to one.
    pub fn attention(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        binding: &mut Binding,
        x: Var,
        tau: Float,
    ) -> Result<Var> {
        let w1 = binding.bind(g, params, self.attn_w1);
        let b1 = binding.bind(g, params, self.attn_b1);
        let w2 = binding.bind(g, params, self.attn_w2);
        let b2 = binding.bind(g, params, self.attn_b2);
        let pooled = g.global_avg_pool(x)?;
        let h = g.matmul(pooled, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let logits = g.matmul(h, w2)?;
        let logits = g.add_row(logits, b2)?;
        g.softmax_rows(logits, tau)
    }

    /// Mix kernel rows by attention: `π [b, k] @ kernels [k, m] → [b, m]`.
    pub fn aggregate(&self, g: &mut Graph, pi: Var, kernels: Var) -> Result<Var> {
        g.matmul(pi, kernels)
    }

    /// Convolve each sample with its own assembled kernel `[b, m]` and add
    /// the shared bias.
    pub fn conv_with(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        binding: &mut Binding,
        x: Var,
        theta_hat: Var,
    ) -> Result<Var> {
        let b = g.value(x).shape()[0];
        let w = g.reshape(theta_hat, vec![b, self.out_ch, self.in_ch, self.kh, self.kw])?;
        let y = g.conv2d_per_sample(x, w, self.stride, self.pad)?;
        let bias = binding.bind(g, params, self.bias);
        g.add_channel_bias(y, bias)
    }

    /// Fully dynamic forward pass.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        binding: &mut Binding,
        x: Var,
        tau: Float,
    ) -> Result<Var> {
        let pi = self.attention(g, params, binding, x, tau)?;
        let kernels = binding.bind(g, params, self.kernels);
        let theta = self.aggregate(g, pi, kernels)?;
        self.conv_with(g, params, binding, x, theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d_naive;
    use crate::rng;

    fn sample_input(b: usize, ci: usize, h: usize, w: usize) -> Tensor {
        let data = (0..b * ci * h * w).map(|i| ((i as Float) * 0.713).sin()).collect();
        Tensor::new(vec![b, ci, h, w], data).unwrap()
    }

    fn build_layer(k: usize) -> (DyConvLayer, ParamSet) {
        let mut params = ParamSet::new();
        let mut r = rng::stream(7, "test-init");
        let layer = DyConvLayer::init("dc", k, 2, 3, 3, 3, 1, 1, &mut params, &mut r);
        (layer, params)
    }

    #[test]
    fn single_kernel_attention_is_always_one() {
        let (layer, params) = build_layer(1);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let x = g.leaf(sample_input(3, 2, 5, 5));
        let pi = layer.attention(&mut g, &params, &mut binding, x, 1.0).unwrap();
        for &v in g.value(pi).data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn attention_rows_sum_to_one() {
        let (layer, params) = build_layer(4);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let x = g.leaf(sample_input(5, 2, 6, 6));
        let pi = layer.attention(&mut g, &params, &mut binding, x, 2.5).unwrap();
        let d = g.value(pi).data();
        for r in 0..5 {
            let s: Float = d[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn identical_kernels_reduce_to_static_conv() {
        let (layer, mut params) = build_layer(4);
        // Overwrite all kernel rows with row 0.
        let m = layer.kernel_len();
        let first: Vec<Float> = params.get(layer.kernels).data()[..m].to_vec();
        {
            let data = params.get_mut(layer.kernels).data_mut();
            for r in 1..4 {
                data[r * m..(r + 1) * m].copy_from_slice(&first);
            }
        }
        let x = sample_input(2, 2, 5, 5);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let xv = g.leaf(x.clone());
        let y = layer.forward(&mut g, &params, &mut binding, xv, 1.0).unwrap();

        let want = conv2d_naive(x.data(), 2, 2, 5, 5, &first, 3, 3, 3, 1, 1);
        let got = g.value(y).data();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn one_hot_attention_selects_single_kernel() {
        let (layer, params) = build_layer(3);
        let m = layer.kernel_len();
        let x = sample_input(2, 2, 5, 5);
        for hot in 0..3 {
            let mut g = Graph::new();
            let mut binding = Binding::new();
            let xv = g.leaf(x.clone());
            let mut pi_data = vec![0.0; 2 * 3];
            pi_data[hot] = 1.0;
            pi_data[3 + hot] = 1.0;
            let pi = g.leaf(Tensor::new(vec![2, 3], pi_data).unwrap());
            let kernels = binding.bind(&mut g, &params, layer.kernels);
            let theta = layer.aggregate(&mut g, pi, kernels).unwrap();
            let y = layer.conv_with(&mut g, &params, &mut binding, xv, theta).unwrap();

            let kernel_row = &params.get(layer.kernels).data()[hot * m..(hot + 1) * m];
            let want = conv2d_naive(x.data(), 2, 2, 5, 5, kernel_row, 3, 3, 3, 1, 1);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn two_kernel_mixture_matches_hand_loop() {
        let (layer, params) = build_layer(2);
        let m = layer.kernel_len();
        let x = sample_input(1, 2, 4, 4);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let xv = g.leaf(x.clone());
        let pi = g.leaf(Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap());
        let kernels = binding.bind(&mut g, &params, layer.kernels);
        let theta = layer.aggregate(&mut g, pi, kernels).unwrap();
        let y = layer.conv_with(&mut g, &params, &mut binding, xv, theta).unwrap();

        let kd = params.get(layer.kernels).data();
        let mixed: Vec<Float> = (0..m).map(|i| 0.3 * kd[i] + 0.7 * kd[m + i]).collect();
        let want = conv2d_naive(x.data(), 1, 2, 4, 4, &mixed, 3, 3, 3, 1, 1);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn large_temperature_flattens_attention() {
        let (layer, params) = build_layer(4);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let x = g.leaf(sample_input(2, 2, 5, 5));
        let pi = layer.attention(&mut g, &params, &mut binding, x, 1e9).unwrap();
        for &v in g.value(pi).data() {
            assert!((v - 0.25).abs() <= 1e-6);
        }
    }
}
