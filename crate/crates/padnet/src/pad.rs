//! Partially dynamic parameterization: an indicator mask splits each fully
//! dynamic layer's flattened parameter vector into a per-sample dynamic mode
//! and a shared static mode, blended as
//!
//! ```text
//! θ̂_j = λ_d · θ̃_j        if mask_j = 1
//! θ̂_j = λ_s · θ̄_j        if mask_j = 0
//! ```
//!
//! built in-graph as `λ_d·(θ̃ ⊙ M) + λ_s·(θ̄ ⊙ (1−M))` so that binding the
//! mask as a differentiable leaf yields exactly the relaxed mask gradient
//! the partition step needs.

use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamId, ParamSet};
use crate::tensor::{Float, Tensor};

/// Binary dynamic/static indicator, one bit per flattened parameter
/// position. `1` = dynamic, `0` = static.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMask {
    bits: Vec<u8>,
}

impl IndicatorMask {
    pub fn ones(m: usize) -> Self {
        IndicatorMask { bits: vec![1; m] }
    }

    pub fn zeros(m: usize) -> Self {
        IndicatorMask { bits: vec![0; m] }
    }

    pub fn from_slice(bits: &[u8]) -> Result<Self> {
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(PadError::InvalidArgument(format!("mask entries must be 0 or 1, got {bad}")));
        }
        Ok(IndicatorMask { bits: bits.to_vec() })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_dynamic(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn set(&mut self, i: usize, dynamic: bool) {
        self.bits[i] = dynamic as u8;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn dynamic_count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn ratio(&self) -> Float {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.dynamic_count() as Float / self.len() as Float
    }

    pub fn to_float(&self) -> Vec<Float> {
        self.bits.iter().map(|&b| b as Float).collect()
    }

    pub fn dynamic_positions(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect()
    }

    pub fn static_positions(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 0).map(|(i, _)| i).collect()
    }

    /// True if every dynamic position of `other` is also dynamic here.
    pub fn is_superset_of(&self, other: &IndicatorMask) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a >= b)
    }

    /// Pack to a little-endian bitset: position `i` lands in byte `i / 8`,
    /// bit `i % 8`.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; (self.bits.len() + 7) / 8];
        for (i, &b) in self.bits.iter().enumerate() {
            out[i / 8] |= b << (i % 8);
        }
        out
    }

    pub fn unpack(bytes: &[u8], m: usize) -> Result<Self> {
        if bytes.len() != (m + 7) / 8 {
            return Err(PadError::Format {
                offset: 0,
                message: format!("packed mask holds {} bytes, expected {} for {m} bits", bytes.len(), (m + 7) / 8),
            });
        }
        // Trailing padding bits must be zero; anything else means the byte
        // stream is not what the writer produced.
        if m % 8 != 0 {
            let last = bytes[bytes.len() - 1];
            if last >> (m % 8) != 0 {
                return Err(PadError::Format {
                    offset: (bytes.len() - 1) as u64,
                    message: "nonzero padding bits in packed mask".into(),
                });
            }
        }
        let bits = (0..m).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
        Ok(IndicatorMask { bits })
    }
}

/// Which of the two mode factors λ_d, λ_s train, and under what constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Both fixed at 1.
    None,
    /// λ_s trains, λ_d stays 1.
    StaticOnly,
    /// λ_d trains, λ_s stays 1.
    DynamicOnly,
    /// Both train without constraint.
    BothFree,
    /// One logit θ parameterizes λ_d = 2·σ(θ), λ_s = 2 − λ_d, so the pair
    /// always sums to exactly 2.
    SumTwo,
}

/// The trainable factor scalars of one layer.
#[derive(Debug, Clone)]
pub struct LambdaParams {
    pub mode: LambdaMode,
    pub theta: Option<ParamId>,
    pub lambda_d: Option<ParamId>,
    pub lambda_s: Option<ParamId>,
}

impl LambdaParams {
    pub fn init(name: &str, mode: LambdaMode, params: &mut ParamSet) -> Self {
        let one = || Tensor::new(vec![1], vec![1.0]).unwrap();
        let (theta, lambda_d, lambda_s) = match mode {
            LambdaMode::None => (None, None, None),
            LambdaMode::StaticOnly => (None, None, Some(params.add(format!("{name}.lambda_s"), one()))),
            LambdaMode::DynamicOnly => (None, Some(params.add(format!("{name}.lambda_d"), one())), None),
            LambdaMode::BothFree => (
                None,
                Some(params.add(format!("{name}.lambda_d"), one())),
                Some(params.add(format!("{name}.lambda_s"), one())),
            ),
            LambdaMode::SumTwo => (
                Some(params.add(format!("{name}.lambda_theta"), Tensor::new(vec![1], vec![0.0]).unwrap())),
                None,
                None,
            ),
        };
        LambdaParams { mode, theta, lambda_d, lambda_s }
    }

    /// Bind (λ_d, λ_s) into the graph as single-element vars.
    pub fn build(&self, g: &mut Graph, params: &ParamSet, binding: &mut Binding) -> Result<(Var, Var)> {
        let one = |g: &mut Graph| g.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        match self.mode {
            LambdaMode::None => Ok((one(g), one(g))),
            LambdaMode::StaticOnly => {
                let ls = binding.bind(g, params, self.lambda_s.unwrap());
                Ok((one(g), ls))
            }
            LambdaMode::DynamicOnly => {
                let ld = binding.bind(g, params, self.lambda_d.unwrap());
                Ok((ld, one(g)))
            }
            LambdaMode::BothFree => {
                let ld = binding.bind(g, params, self.lambda_d.unwrap());
                let ls = binding.bind(g, params, self.lambda_s.unwrap());
                Ok((ld, ls))
            }
            LambdaMode::SumTwo => {
                let theta = binding.bind(g, params, self.theta.unwrap());
                let sig = g.sigmoid(theta)?;
                let ld = g.scale(sig, 2.0)?;
                let neg = g.scale(ld, -1.0)?;
                let ls = g.add_scalar(neg, 2.0)?;
                Ok((ld, ls))
            }
        }
    }

    /// Current numeric (λ_d, λ_s) straight from the parameter store.
    pub fn values(&self, params: &ParamSet) -> (Float, Float) {
        match self.mode {
            LambdaMode::None => (1.0, 1.0),
            LambdaMode::StaticOnly => (1.0, params.get(self.lambda_s.unwrap()).data()[0]),
            LambdaMode::DynamicOnly => (params.get(self.lambda_d.unwrap()).data()[0], 1.0),
            LambdaMode::BothFree => (
                params.get(self.lambda_d.unwrap()).data()[0],
                params.get(self.lambda_s.unwrap()).data()[0],
            ),
            LambdaMode::SumTwo => {
                let theta = params.get(self.theta.unwrap()).data()[0];
                let ld = 2.0 * crate::graph::stable_sigmoid(theta);
                (ld, 2.0 - ld)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.theta, self.lambda_d, self.lambda_s].iter().flatten().copied().collect()
    }
}

/// Whether masked-out positions fall back to the static copy or to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Static positions read λ_s·θ̄ (the partially dynamic scheme).
    Partial,
    /// Static positions are exactly zero (magnitude-style pruning of the
    /// dynamic parameters; no static copy, no λ).
    PruneToZero,
}

/// Per-layer partition state attached to a fully dynamic layer.
#[derive(Debug, Clone)]
pub struct PadState {
    pub mask: IndicatorMask,
    /// Static copy θ̄: `[m]` until compaction, `[m − dynamic_count]` after.
    pub theta_bar: ParamId,
    pub lambda: LambdaParams,
    pub pad_mode: PadMode,
    pub compacted: bool,
    /// Populated at compaction time, in ascending order.
    pub dyn_positions: Vec<usize>,
    pub static_positions: Vec<usize>,
}

impl PadState {
    /// Fresh state with an all-dynamic mask.
    pub fn init(
        name: &str,
        theta_bar_init: Tensor,
        lambda_mode: LambdaMode,
        pad_mode: PadMode,
        params: &mut ParamSet,
    ) -> Self {
        let m = theta_bar_init.numel();
        let theta_bar = params.add(format!("{name}.theta_bar"), theta_bar_init);
        let lambda = LambdaParams::init(name, lambda_mode, params);
        PadState {
            mask: IndicatorMask::ones(m),
            theta_bar,
            lambda,
            pad_mode,
            compacted: false,
            dyn_positions: Vec::new(),
            static_positions: Vec::new(),
        }
    }

    /// Mask as a float leaf. With `with_grad` the leaf is differentiable so
    /// `backward` produces the relaxed mask gradient.
    pub fn bind_mask(&self, g: &mut Graph, with_grad: bool) -> Result<Var> {
        let t = Tensor::new(vec![self.mask.len()], self.mask.to_float())?;
        Ok(if with_grad { g.leaf_grad(t) } else { g.leaf(t) })
    }

    /// Blend per-sample dynamic values `[b, m]` with the static copy under
    /// the current mask (bound as `mask_var`). Uncompacted layout only.
    pub fn assemble(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        binding: &mut Binding,
        theta_tilde: Var,
        mask_var: Var,
    ) -> Result<Var> {
        if self.compacted {
            return Err(PadError::InvalidArgument(
                "assemble on a compacted layer; use assemble_compacted".into(),
            ));
        }
        match self.pad_mode {
            PadMode::PruneToZero => g.mul_row(theta_tilde, mask_var),
            PadMode::Partial => {
                let (ld, ls) = self.lambda.build(g, params, binding)?;
                let dynp = g.mul_row(theta_tilde, mask_var)?;
                let dynp = g.mul_scalar(dynp, ld)?;
                let neg = g.scale(mask_var, -1.0)?;
                let inv = g.add_scalar(neg, 1.0)?;
                let bar = binding.bind(g, params, self.theta_bar);
                let statp = g.mul(bar, inv)?;
                let statp = g.mul_scalar(statp, ls)?;
                g.add_row(dynp, statp)
            }
        }
    }

    /// Compacted counterpart: dynamic values arrive already narrowed to
    /// `[b, dynamic_count]` and are scattered back to full width alongside
    /// the shrunken static copy.
    pub fn assemble_compacted(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        binding: &mut Binding,
        dyn_narrow: Var,
    ) -> Result<Var> {
        if !self.compacted {
            return Err(PadError::InvalidArgument("assemble_compacted on an uncompacted layer".into()));
        }
        match self.pad_mode {
            PadMode::PruneToZero => {
                let zeros = g.leaf(Tensor::zeros(vec![self.static_positions.len()]));
                g.assemble_scatter(dyn_narrow, zeros, &self.dyn_positions, &self.static_positions)
            }
            PadMode::Partial => {
                let (ld, ls) = self.lambda.build(g, params, binding)?;
                let dynp = g.mul_scalar(dyn_narrow, ld)?;
                let bar = binding.bind(g, params, self.theta_bar);
                let statp = g.mul_scalar(bar, ls)?;
                g.assemble_scatter(dynp, statp, &self.dyn_positions, &self.static_positions)
            }
        }
    }

    /// Overwrite θ̄ at every static position from a full-length source
    /// vector (dynamic positions of θ̄ are left as they are).
    pub fn snapshot_static(&self, params: &mut ParamSet, source: &[Float]) -> Result<()> {
        if self.compacted {
            return Err(PadError::AlreadyCompacted(params.name(self.theta_bar).to_string()));
        }
        if source.len() != self.mask.len() {
            return Err(PadError::ShapeMismatch {
                op: "snapshot_static",
                detail: format!("source length {} vs mask length {}", source.len(), self.mask.len()),
            });
        }
        let bar = params.get_mut(self.theta_bar).data_mut();
        for i in 0..source.len() {
            if !self.mask.is_dynamic(i) {
                bar[i] = source[i];
            }
        }
        Ok(())
    }

    /// Keep θ̄ trainable exactly where the mask is static.
    pub fn refresh_theta_bar_freeze(&self, params: &mut ParamSet) -> Result<()> {
        let inv: Vec<Float> = self.mask.bits().iter().map(|&b| 1.0 - b as Float).collect();
        params.set_update_mask(self.theta_bar, Some(inv))
    }
}

/// What compaction did to one layer's storage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactionReport {
    pub layer: String,
    pub mask_len: usize,
    pub dynamic_count: usize,
    /// Scalars governed by the mask before compaction (dynamic stacks plus
    /// the full static copy).
    pub masked_scalars_before: usize,
    /// After: every dynamic stack keeps only dynamic columns, θ̄ keeps only
    /// static positions.
    pub masked_scalars_after: usize,
    /// Untouched side parameters (attention, gate, biases, λ).
    pub aux_scalars: usize,
}

impl CompactionReport {
    pub fn total_before(&self) -> usize {
        self.masked_scalars_before + self.aux_scalars
    }

    pub fn total_after(&self) -> usize {
        self.masked_scalars_after + self.aux_scalars
    }
}

/// Keep the listed columns of a `[rows, cols]` tensor, preserving order.
pub fn keep_columns(t: &Tensor, keep: &[usize]) -> Result<Tensor> {
    let (rows, cols) = match t.shape() {
        [r, c] => (*r, *c),
        s => {
            return Err(PadError::ShapeMismatch {
                op: "keep_columns",
                detail: format!("expected rank 2, got {s:?}"),
            })
        }
    };
    if let Some(&bad) = keep.iter().find(|&&c| c >= cols) {
        return Err(PadError::InvalidArgument(format!("column {bad} out of range {cols}")));
    }
    let src = t.data();
    let mut data = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        for &c in keep {
            data.push(src[r * cols + c]);
        }
    }
    Tensor::new(vec![rows, keep.len()], data)
}

/// Keep the listed positions of a rank-1 tensor, preserving order.
pub fn keep_positions(t: &Tensor, keep: &[usize]) -> Result<Tensor> {
    let n = match t.shape() {
        [n] => *n,
        s => {
            return Err(PadError::ShapeMismatch {
                op: "keep_positions",
                detail: format!("expected rank 1, got {s:?}"),
            })
        }
    };
    if let Some(&bad) = keep.iter().find(|&&c| c >= n) {
        return Err(PadError::InvalidArgument(format!("position {bad} out of range {n}")));
    }
    let src = t.data();
    Tensor::new(vec![keep.len()], keep.iter().map(|&i| src[i]).collect())
}

/// Column means of a `[rows, cols]` tensor (the static snapshot rule for
/// dynamic convolutions: average the parallel kernels).
pub fn column_means(t: &Tensor) -> Result<Vec<Float>> {
    let (rows, cols) = match t.shape() {
        [r, c] => (*r, *c),
        s => {
            return Err(PadError::ShapeMismatch {
                op: "column_means",
                detail: format!("expected rank 2, got {s:?}"),
            })
        }
    };
    let src = t.data();
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += src[r * cols + c];
        }
    }
    for v in &mut out {
        *v /= rows as Float;
    }
    Ok(out)
}

/// Shrink a layer's dynamic stack and static copy to the mask-selected
/// storage. `dynamic_stack` is any `[rows, m]` parameter whose columns follow
/// the mask (kernel rows for dynamic convolution, expert rows for the
/// mixture). Returns the positions kept on each side.
pub fn compact(
    state: &mut PadState,
    params: &mut ParamSet,
    dynamic_stack: ParamId,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if state.compacted {
        return Err(PadError::AlreadyCompacted(params.name(dynamic_stack).to_string()));
    }
    let dyn_pos = state.mask.dynamic_positions();
    let static_pos = state.mask.static_positions();

    let new_stack = keep_columns(params.get(dynamic_stack), &dyn_pos)?;
    params.replace(dynamic_stack, new_stack);

    match state.pad_mode {
        PadMode::Partial => {
            let new_bar = keep_positions(params.get(state.theta_bar), &static_pos)?;
            params.replace(state.theta_bar, new_bar);
        }
        PadMode::PruneToZero => {
            params.replace(state.theta_bar, Tensor::zeros(vec![0]));
        }
    }

    state.compacted = true;
    state.dyn_positions = dyn_pos.clone();
    state.static_positions = static_pos.clone();
    Ok((dyn_pos, static_pos))
}
