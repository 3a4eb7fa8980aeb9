//! Mixture of experts: a softmax gate routes each sample to its top-`n`
//! two-layer feed-forward experts, whose outputs are blended with the
//! renormalized gate weights.
//!
//! The blend is evaluated densely — every expert's output is multiplied by
//! its (mostly zero) gate column and summed in ascending expert order. For
//! samples that do not select an expert the gate column is exactly `0.0`, so
//! dense evaluation is bitwise identical to materializing only the selected
//! experts, and keeps the tape simple.

use rand_chacha::ChaCha8Rng;

use super::{normal_init, uniform_small};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamId, ParamSet};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone)]
pub struct MoELayer {
    pub name: String,
    /// Expert count.
    pub m: usize,
    /// Experts selected per sample.
    pub n: usize,
    pub d: usize,
    pub h: usize,
    /// `[d, m]` gating projection.
    pub gate_w: ParamId,
    /// `[m, p]` where `p = d·h + h·d`: each row is one expert's two weight
    /// matrices, flattened and concatenated.
    pub expert_w: ParamId,
    /// `[m, h]` first-layer biases.
    pub b1: ParamId,
    /// `[m, d]` second-layer biases.
    pub b2: ParamId,
}

impl MoELayer {
    /// Flattened per-expert weight length `p`.
    pub fn expert_len(&self) -> usize {
        2 * self.d * self.h
    }

    /// All experts start from one shared draw, so routing is the only thing
    /// that can differentiate them early in training.
    pub fn init(name: &str, m: usize, n: usize, d: usize, h: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        assert!(m >= 1 && n >= 1 && n <= m, "need 1 ≤ n ≤ m");
        let gate_w = params.add(format!("{name}.gate.w"), uniform_small(rng, vec![d, m], 0.1));
        let p = 2 * d * h;
        let w1 = normal_init(rng, vec![d * h], (2.0 / d as Float).sqrt());
        let w2 = normal_init(rng, vec![h * d], (2.0 / h as Float).sqrt());
        let mut one_expert = Vec::with_capacity(p);
        one_expert.extend_from_slice(w1.data());
        one_expert.extend_from_slice(w2.data());
        let mut all = Vec::with_capacity(m * p);
        for _ in 0..m {
            all.extend_from_slice(&one_expert);
        }
        let expert_w = params.add(format!("{name}.experts.w"), Tensor::new(vec![m, p], all).unwrap());
        let b1 = params.add(format!("{name}.experts.b1"), Tensor::zeros(vec![m, h]));
        let b2 = params.add(format!("{name}.experts.b2"), Tensor::zeros(vec![m, d]));
        MoELayer { name: name.to_string(), m, n, d, h, gate_w, expert_w, b1, b2 }
    }

    /// Gate: softmax over expert logits, keep the top `n` (ties resolve to
    /// the lower index), renormalize the kept weights to sum to one, and
    /// scatter them back to a dense `[b, m]` matrix that is zero everywhere
    /// else. Also returns the selected indices, `n` per row in ascending
    /// order.
    pub fn gate(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        binding: &mut Binding,
        x: Var,
    ) -> Result<(Var, Vec<usize>)> {
        let gw = binding.bind(g, params, self.gate_w);
        let logits = g.matmul(x, gw)?;
        let probs = g.softmax_rows(logits, 1.0)?;
        let (vals, indices) = g.row_topk(probs, self.n)?;
        let sums = g.row_sum(vals)?;
        let norm = g.div_per_row(vals, sums)?;
        let dense = g.row_scatter(norm, &indices, self.m)?;
        Ok((dense, indices))
    }

    /// Run expert `i` with an explicit flattened weight vector `[p]`
    /// (callers decide whether that vector is the raw row or a
    /// dynamic/static assembly).
    pub fn expert_with(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        binding: &mut Binding,
        x: Var,
        i: usize,
        w_flat: Var,
    ) -> Result<Var> {
        let dh = self.d * self.h;
        let w1 = g.segment(w_flat, 0, dh)?;
        let w1 = g.reshape(w1, vec![self.d, self.h])?;
        let w2 = g.segment(w_flat, dh, dh)?;
        let w2 = g.reshape(w2, vec![self.h, self.d])?;
        let b1_all = binding.bind(g, params, self.b1);
        let b2_all = binding.bind(g, params, self.b2);
        let b1 = g.row_slice(b1_all, i)?;
        let b2 = g.row_slice(b2_all, i)?;
        let hid = g.matmul(x, w1)?;
        let hid = g.add_row(hid, b1)?;
        let hid = g.relu(hid)?;
        let y = g.matmul(hid, w2)?;
        g.add_row(y, b2)
    }

    /// Fully dynamic forward: gate, run every expert on its raw weights,
    /// blend by the dense gate columns.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, binding: &mut Binding, x: Var) -> Result<Var> {
        let (dense, _) = self.gate(g, params, binding, x)?;
        let expert_w = binding.bind(g, params, self.expert_w);
        let mut acc: Option<Var> = None;
        for i in 0..self.m {
            let row = g.row_slice(expert_w, i)?;
            let y = self.expert_with(g, params, binding, x, i, row)?;
            let gi = g.col_slice(dense, i)?;
            let term = g.mul_per_row(y, gi)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        Ok(acc.expect("m >= 1"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn build(m: usize, n: usize) -> (MoELayer, ParamSet) {
        let mut params = ParamSet::new();
        let mut r = rng::stream(11, "moe-test");
        let layer = MoELayer::init("moe", m, n, 4, 6, &mut params, &mut r);
        (layer, params)
    }

    fn sample_x(b: usize, d: usize) -> Tensor {
        let data = (0..b * d).map(|i| ((i as Float) * 0.57).cos()).collect();
        Tensor::new(vec![b, d], data).unwrap()
    }

    #[test]
    fn top1_gate_puts_full_weight_on_argmax() {
        let (layer, params) = build(2, 1);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        // Rig x so logits are known: use gate weights as identity by feeding
        // a graph-level check instead — simpler to verify the invariant:
        let x = g.leaf(sample_x(4, 4));
        let (dense, idx) = layer.gate(&mut g, &params, &mut binding, x).unwrap();
        let d = g.value(dense).data();
        for r in 0..4 {
            let row = &d[r * 2..(r + 1) * 2];
            let hot = idx[r];
            assert_eq!(row[hot], 1.0, "renormalized top-1 weight must be exactly 1");
            assert_eq!(row[1 - hot], 0.0);
        }
    }

    #[test]
    fn renormalized_pair_from_known_probabilities() {
        // softmax([0.5, 0.3, 0.2]-style case): select via explicit probs by
        // driving row_topk + renorm directly on a crafted tensor.
        let mut g = Graph::new();
        let probs = g.leaf(Tensor::new(vec![1, 3], vec![0.5, 0.3, 0.2]).unwrap());
        let (vals, idx) = g.row_topk(probs, 2).unwrap();
        let sums = g.row_sum(vals).unwrap();
        let norm = g.div_per_row(vals, sums).unwrap();
        assert_eq!(idx, vec![0, 1]);
        let d = g.value(norm).data();
        assert!((d[0] - 0.625).abs() <= 1e-12);
        assert!((d[1] - 0.375).abs() <= 1e-12);
    }

    #[test]
    fn gate_weights_sum_to_one_per_row() {
        let (layer, params) = build(8, 3);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let x = g.leaf(sample_x(6, 4));
        let (dense, _) = layer.gate(&mut g, &params, &mut binding, x).unwrap();
        let d = g.value(dense).data();
        for r in 0..6 {
            let s: Float = d[r * 8..(r + 1) * 8].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            let nonzero = d[r * 8..(r + 1) * 8].iter().filter(|v| **v != 0.0).count();
            assert_eq!(nonzero, 3);
        }
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn identical_experts_make_routing_irrelevant() {
        // Experts share their init here by construction; with biases also
        // shared (all zero), output must equal any single expert's output.
        let (layer, params) = build(5, 2);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let x = g.leaf(sample_x(3, 4));
        let y = layer.forward(&mut g, &params, &mut binding, x).unwrap();

        let mut g2 = Graph::new();
        let mut b2 = Binding::new();
        let x2 = g2.leaf(sample_x(3, 4));
        let ew = b2.bind(&mut g2, &params, layer.expert_w);
        let row = g2.row_slice(ew, 0).unwrap();
        let single = layer.expert_with(&mut g2, &params, &mut b2, x2, 0, row).unwrap();

        for (a, b) in g.value(y).data().iter().zip(g2.value(single).data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn full_selection_equals_plain_softmax_mixture() {
        // n = m: renormalizing all softmax weights is the identity, so the
        // dense gate must equal the softmax itself.
        let (layer, params) = build(4, 4);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let x = g.leaf(sample_x(5, 4));
        let (dense, _) = layer.gate(&mut g, &params, &mut binding, x).unwrap();

        let gw = binding.bind(&mut g, &params, layer.gate_w);
        let x2 = g.leaf(sample_x(5, 4));
        let logits = g.matmul(x2, gw).unwrap();
        let probs = g.softmax_rows(logits, 1.0).unwrap();

        for (a, b) in g.value(dense).data().iter().zip(g.value(probs).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn expert_relabeling_leaves_output_unchanged() {
        // Swap two experts' weights, biases, and gate columns: outputs must
        // match to machine precision.
        let (layer, mut params) = build(4, 2);
        // Differentiate the experts first so the test has teeth.
        {
            let p = layer.expert_len();
            let data = params.get_mut(layer.expert_w).data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                *v += ((i / p) as Float) * 0.05 * (((i % p) as Float) * 0.31).sin();
            }
        }
        let x = sample_x(6, 4);
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let xv = g.leaf(x.clone());
        let y_before = layer.forward(&mut g, &params, &mut binding, xv).unwrap();
        let before = g.value(y_before).data().to_vec();

        // Relabel experts 1 <-> 3.
        let (a, b) = (1usize, 3usize);
        let p = layer.expert_len();
        let swap_rows = |data: &mut [Float], width: usize| {
            for j in 0..width {
                data.swap(a * width + j, b * width + j);
            }
        };
        swap_rows(params.get_mut(layer.expert_w).data_mut(), p);
        swap_rows(params.get_mut(layer.b1).data_mut(), layer.h);
        swap_rows(params.get_mut(layer.b2).data_mut(), layer.d);
        {
            // Gate columns live in a [d, m] matrix: swap columns a and b.
            let data = params.get_mut(layer.gate_w).data_mut();
            for r in 0..layer.d {
                data.swap(r * layer.m + a, r * layer.m + b);
            }
        }

        let mut g2 = Graph::new();
        let mut b2 = Binding::new();
        let xv2 = g2.leaf(x);
        let y_after = layer.forward(&mut g2, &params, &mut b2, xv2).unwrap();
        for (u, v) in before.iter().zip(g2.value(y_after).data()) {
            assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
        }
    }
}
