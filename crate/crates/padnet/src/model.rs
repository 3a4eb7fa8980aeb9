//! Model assembly and orchestration: builds a layer stack from a config,
//! runs forward/loss graphs, applies partition masks with the matching
//! freeze and snapshot rules, compacts storage, and round-trips everything
//! through the checkpoint container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::config::{ExperimentConfig, LayerConfig, Method};
use crate::conv::conv_out_dim;
use crate::error::{PadError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{ConvLayer, DyConvLayer, FfnLayer, LinearLayer, MoELayer};
use crate::optim::OptimState;
use crate::pad::{column_means, compact, CompactionReport, IndicatorMask, LambdaMode, PadMode, PadState};
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng;
use crate::tensor::{Float, Tensor};

fn bad(field: String, message: impl Into<String>) -> PadError {
    PadError::Config { field, message: message.into() }
}

/// Freeze the static columns of a `[rows, mask_len]` dynamic stack.
fn refresh_stack_freeze(params: &mut ParamSet, stack: ParamId, rows: usize, mask: &IndicatorMask) -> Result<()> {
    let col = mask.to_float();
    let mut stack_mask = Vec::with_capacity(rows * col.len());
    for _ in 0..rows {
        stack_mask.extend_from_slice(&col);
    }
    params.set_update_mask(stack, Some(stack_mask))
}

/// Shape of one sample as it flows through the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureShape {
    Image { c: usize, h: usize, w: usize },
    Vector { d: usize },
}

impl FeatureShape {
    /// Infer the per-sample shape from a dataset's input tensor.
    pub fn of_inputs(inputs: &Tensor) -> Result<FeatureShape> {
        match inputs.shape() {
            [_, c, h, w] => Ok(FeatureShape::Image { c: *c, h: *h, w: *w }),
            [_, d] => Ok(FeatureShape::Vector { d: *d }),
            s => Err(PadError::ShapeMismatch {
                op: "feature_shape",
                detail: format!("expected [n, c, h, w] or [n, d] inputs, got {s:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Conv(ConvLayer),
    DyConv { layer: DyConvLayer, pad: Option<PadState> },
    Linear(LinearLayer),
    Ffn(FfnLayer),
    Moe { layer: MoELayer, pad: Option<PadState> },
    Relu,
    GlobalPool,
}

impl Block {
    fn pad_state(&self) -> Option<&PadState> {
        match self {
            Block::DyConv { pad, .. } | Block::Moe { pad, .. } => pad.as_ref(),
            _ => None,
        }
    }

    /// Name of the dynamic layer this block wraps, if it is partitioned.
    fn pad_name(&self) -> Option<&str> {
        match self {
            Block::DyConv { layer, pad: Some(_) } => Some(&layer.name),
            Block::Moe { layer, pad: Some(_) } => Some(&layer.name),
            _ => None,
        }
    }
}

/// One forward pass worth of bookkeeping.
#[derive(Debug)]
pub struct Trace {
    pub logits: Var,
    pub binding: Binding,
    /// Mask leaves, one per partitioned block in block order; populated only
    /// when the pass was asked for mask gradients.
    pub mask_vars: Vec<Var>,
    /// Per-sample mixing coefficients, one per dynamic block in block order:
    /// attention `π [b, k]` for dynamic convolutions, routing weights
    /// `[b, m]` for expert mixtures.
    pub mixes: Vec<Var>,
    /// Each block's output, in block order (the last one is `logits`).
    pub block_outputs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub blocks: Vec<Block>,
    pub params: ParamSet,
    pub input: FeatureShape,
    pub class_count: usize,
}

impl Model {
    /// Build the stack described by the config, inferring input widths layer
    /// by layer. Dynamic layers get partition state unless the method is
    /// fully dynamic.
    pub fn build(cfg: &ExperimentConfig, input: FeatureShape, class_count: usize) -> Result<Model> {
        let mut params = ParamSet::new();
        let mut r = rng::stream(cfg.seed, "model-init");
        let pad_enabled = cfg.pad.method != Method::FullyDynamic;
        let pad_mode = if cfg.pad.method == Method::Prune { PadMode::PruneToZero } else { PadMode::Partial };
        let lambda_mode = if pad_mode == PadMode::PruneToZero { LambdaMode::None } else { cfg.pad.lambda };

        let mut shape = input;
        let mut blocks = Vec::with_capacity(cfg.model.layers.len());
        for (i, lc) in cfg.model.layers.iter().enumerate() {
            let field = format!("model.layers[{i}]");
            let block = match *lc {
                LayerConfig::Conv { out_ch, ksize, stride, pad } => {
                    let FeatureShape::Image { c, h, w } = shape else {
                        return Err(bad(field, "convolution needs image input"));
                    };
                    let oh = conv_out_dim(h, ksize, stride, pad)?;
                    let ow = conv_out_dim(w, ksize, stride, pad)?;
                    let layer =
                        ConvLayer::init(&format!("layer{i}.conv"), c, out_ch, ksize, ksize, stride, pad, &mut params, &mut r);
                    shape = FeatureShape::Image { c: out_ch, h: oh, w: ow };
                    Block::Conv(layer)
                }
                LayerConfig::DyConv { out_ch, ksize, stride, pad, kernels } => {
                    let FeatureShape::Image { c, h, w } = shape else {
                        return Err(bad(field, "dynamic convolution needs image input"));
                    };
                    let oh = conv_out_dim(h, ksize, stride, pad)?;
                    let ow = conv_out_dim(w, ksize, stride, pad)?;
                    let name = format!("layer{i}.dyconv");
                    let layer =
                        DyConvLayer::init(&name, kernels, c, out_ch, ksize, ksize, stride, pad, &mut params, &mut r);
                    let pad_state = if pad_enabled {
                        let bar = column_means(params.get(layer.kernels))?;
                        let m = bar.len();
                        let ps = PadState::init(&name, Tensor::new(vec![m], bar)?, lambda_mode, pad_mode, &mut params);
                        ps.refresh_theta_bar_freeze(&mut params)?;
                        Some(ps)
                    } else {
                        None
                    };
                    shape = FeatureShape::Image { c: out_ch, h: oh, w: ow };
                    Block::DyConv { layer, pad: pad_state }
                }
                LayerConfig::Relu => Block::Relu,
                LayerConfig::GlobalPool => {
                    let FeatureShape::Image { c, .. } = shape else {
                        return Err(bad(field, "global pooling needs image input"));
                    };
                    shape = FeatureShape::Vector { d: c };
                    Block::GlobalPool
                }
                LayerConfig::Linear { out_dim } => {
                    let FeatureShape::Vector { d } = shape else {
                        return Err(bad(field, "linear layer needs vector input; pool first"));
                    };
                    let layer = LinearLayer::init(&format!("layer{i}.linear"), d, out_dim, &mut params, &mut r);
                    shape = FeatureShape::Vector { d: out_dim };
                    Block::Linear(layer)
                }
                LayerConfig::Ffn { hidden } => {
                    let FeatureShape::Vector { d } = shape else {
                        return Err(bad(field, "feed-forward block needs vector input"));
                    };
                    Block::Ffn(FfnLayer::init(&format!("layer{i}.ffn"), d, hidden, &mut params, &mut r))
                }
                LayerConfig::Moe { experts, top_n, hidden } => {
                    let FeatureShape::Vector { d } = shape else {
                        return Err(bad(field, "mixture of experts needs vector input"));
                    };
                    let name = format!("layer{i}.moe");
                    let layer = MoELayer::init(&name, experts, top_n, d, hidden, &mut params, &mut r);
                    let pad_state = if pad_enabled {
                        let p = layer.expert_len();
                        let shared = params.get(layer.expert_w).data()[..p].to_vec();
                        let ps = PadState::init(&name, Tensor::new(vec![p], shared)?, lambda_mode, pad_mode, &mut params);
                        ps.refresh_theta_bar_freeze(&mut params)?;
                        Some(ps)
                    } else {
                        None
                    };
                    Block::Moe { layer, pad: pad_state }
                }
            };
            blocks.push(block);
        }
        match shape {
            FeatureShape::Vector { d } if d == class_count => {}
            other => {
                return Err(bad(
                    "model.layers".to_string(),
                    format!("stack must end with {class_count} logits per sample, got {other:?}"),
                ));
            }
        }
        Ok(Model { blocks, params, input, class_count })
    }

    fn check_input(&self, got: &[usize]) -> Result<()> {
        let ok = match (self.input, got) {
            (FeatureShape::Image { c, h, w }, [_, gc, gh, gw]) => (c, h, w) == (*gc, *gh, *gw),
            (FeatureShape::Vector { d }, [_, gd]) => d == *gd,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(PadError::ShapeMismatch {
                op: "model_forward",
                detail: format!("input shape {got:?} does not match model input {:?}", self.input),
            })
        }
    }

    /// Run the stack on an input var already in the graph. With `mask_grads`
    /// each partitioned layer's indicator is bound as a differentiable leaf
    /// so `backward` yields the relaxed mask gradient.
    pub fn forward(&self, g: &mut Graph, x: Var, tau: Float, mask_grads: bool) -> Result<Trace> {
        self.check_input(g.value(x).shape())?;
        let params = &self.params;
        let mut binding = Binding::new();
        let mut mask_vars = Vec::new();
        let mut mixes = Vec::new();
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut cur = x;
        for block in &self.blocks {
            cur = match block {
                Block::Conv(layer) => layer.forward(g, params, &mut binding, cur)?,
                Block::Linear(layer) => layer.forward(g, params, &mut binding, cur)?,
                Block::Ffn(layer) => layer.forward(g, params, &mut binding, cur)?,
                Block::Relu => g.relu(cur)?,
                Block::GlobalPool => g.global_avg_pool(cur)?,
                Block::DyConv { layer, pad } => {
                    let pi = layer.attention(g, params, &mut binding, cur, tau)?;
                    mixes.push(pi);
                    let kernels = binding.bind(g, params, layer.kernels);
                    let tilde = layer.aggregate(g, pi, kernels)?;
                    let theta_hat = match pad {
                        None => tilde,
                        Some(ps) if ps.compacted => {
                            if mask_grads {
                                return Err(PadError::InvalidArgument(
                                    "mask gradients are not available after compaction".into(),
                                ));
                            }
                            ps.assemble_compacted(g, params, &mut binding, tilde)?
                        }
                        Some(ps) => {
                            let mv = ps.bind_mask(g, mask_grads)?;
                            if mask_grads {
                                mask_vars.push(mv);
                            }
                            ps.assemble(g, params, &mut binding, tilde, mv)?
                        }
                    };
                    layer.conv_with(g, params, &mut binding, cur, theta_hat)?
                }
                Block::Moe { layer, pad } => {
                    let (gate, _) = layer.gate(g, params, &mut binding, cur)?;
                    mixes.push(gate);
                    let expert_w = binding.bind(g, params, layer.expert_w);
                    let w_hat = match pad {
                        None => expert_w,
                        Some(ps) if ps.compacted => {
                            if mask_grads {
                                return Err(PadError::InvalidArgument(
                                    "mask gradients are not available after compaction".into(),
                                ));
                            }
                            ps.assemble_compacted(g, params, &mut binding, expert_w)?
                        }
                        Some(ps) => {
                            let mv = ps.bind_mask(g, mask_grads)?;
                            if mask_grads {
                                mask_vars.push(mv);
                            }
                            ps.assemble(g, params, &mut binding, expert_w, mv)?
                        }
                    };
                    let mut acc: Option<Var> = None;
                    for i in 0..layer.m {
                        let row = g.row_slice(w_hat, i)?;
                        let y = layer.expert_with(g, params, &mut binding, cur, i, row)?;
                        let gi = g.col_slice(gate, i)?;
                        let term = g.mul_per_row(y, gi)?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) => g.add(a, term)?,
                        });
                    }
                    acc.expect("expert count is at least one")
                }
            };
            block_outputs.push(cur);
        }
        Ok(Trace { logits: cur, binding, mask_vars, mixes, block_outputs })
    }

    /// Forward plus mean cross-entropy against the targets.
    pub fn loss(
        &self,
        g: &mut Graph,
        inputs: &Tensor,
        targets: &[usize],
        tau: Float,
        mask_grads: bool,
    ) -> Result<(Var, Trace)> {
        let x = g.leaf(inputs.clone());
        let trace = self.forward(g, x, tau, mask_grads)?;
        let loss = g.cross_entropy_logits(trace.logits, targets)?;
        Ok((loss, trace))
    }

    /// Logits for a batch, forward only.
    pub fn logits_for(&self, inputs: &Tensor, tau: Float) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(inputs.clone());
        let trace = self.forward(&mut g, x, tau, false)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Indices of blocks that carry partition state, in block order — the
    /// fixed layer order used everywhere masks travel as lists.
    pub fn pad_block_indices(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.pad_state().map(|_| i))
            .collect()
    }

    pub fn pad_layer_names(&self) -> Vec<String> {
        self.blocks.iter().filter_map(|b| b.pad_name().map(str::to_string)).collect()
    }

    /// One label per block, in block order.
    pub fn block_labels(&self) -> Vec<String> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| match b {
                Block::Conv(layer) => layer.name.clone(),
                Block::Linear(layer) => layer.name.clone(),
                Block::Ffn(layer) => layer.name.clone(),
                Block::DyConv { layer, .. } => layer.name.clone(),
                Block::Moe { layer, .. } => layer.name.clone(),
                Block::Relu => format!("layer{i}.relu"),
                Block::GlobalPool => format!("layer{i}.global_pool"),
            })
            .collect()
    }

    /// Current per-layer masks, cloned, in block order.
    pub fn masks(&self) -> Vec<IndicatorMask> {
        self.blocks.iter().filter_map(|b| b.pad_state().map(|ps| ps.mask.clone())).collect()
    }

    pub fn is_compacted(&self) -> bool {
        self.blocks.iter().any(|b| b.pad_state().map(|ps| ps.compacted).unwrap_or(false))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Install new masks (same order as [`Self::pad_block_indices`]) and
    /// re-derive everything that depends on them: the static snapshot for
    /// dynamic convolutions, the static copy's trainability, and the freeze
    /// of static columns in each dynamic stack.
    pub fn apply_masks(&mut self, masks: &[IndicatorMask]) -> Result<()> {
        let indices = self.pad_block_indices();
        if masks.len() != indices.len() {
            return Err(PadError::ShapeMismatch {
                op: "apply_masks",
                detail: format!("{} masks for {} partitioned layers", masks.len(), indices.len()),
            });
        }
        let Model { blocks, params, .. } = self;
        for (mask, &bi) in masks.iter().zip(&indices) {
            let (ps, stack, rows, snapshot) = match &mut blocks[bi] {
                Block::DyConv { layer, pad: Some(ps) } => (ps, layer.kernels, layer.k, true),
                Block::Moe { layer, pad: Some(ps) } => (ps, layer.expert_w, layer.m, false),
                _ => unreachable!("pad_block_indices only lists partitioned blocks"),
            };
            if ps.compacted {
                return Err(PadError::AlreadyCompacted(params.name(stack).to_string()));
            }
            if mask.len() != ps.mask.len() {
                return Err(PadError::ShapeMismatch {
                    op: "apply_masks",
                    detail: format!("mask length {} vs layer width {}", mask.len(), ps.mask.len()),
                });
            }
            ps.mask = mask.clone();
            if ps.pad_mode == PadMode::Partial {
                if snapshot {
                    let means = column_means(params.get(stack))?;
                    ps.snapshot_static(params, &means)?;
                }
                ps.refresh_theta_bar_freeze(params)?;
            }
            refresh_stack_freeze(params, stack, rows, &ps.mask)?;
        }
        Ok(())
    }

    /// Shrink every partitioned layer to mask-selected storage. Velocity for
    /// the resized parameters is dropped, since the old buffers no longer
    /// line up position for position.
    pub fn compact_all(&mut self, optim: &mut OptimState) -> Result<Vec<CompactionReport>> {
        let Model { blocks, params, .. } = self;
        let mut reports = Vec::new();
        for block in blocks.iter_mut() {
            let (name, stack, ps, aux_ids) = match block {
                Block::DyConv { layer, pad: Some(ps) } => (
                    layer.name.clone(),
                    layer.kernels,
                    ps,
                    vec![layer.bias, layer.attn_w1, layer.attn_b1, layer.attn_w2, layer.attn_b2],
                ),
                Block::Moe { layer, pad: Some(ps) } => {
                    (layer.name.clone(), layer.expert_w, ps, vec![layer.gate_w, layer.b1, layer.b2])
                }
                _ => continue,
            };
            let mask_len = ps.mask.len();
            let dynamic_count = ps.mask.dynamic_count();
            let before = params.get(stack).numel() + params.get(ps.theta_bar).numel();
            let aux_scalars = aux_ids
                .iter()
                .chain(ps.lambda.param_ids().iter())
                .map(|&id| params.get(id).numel())
                .sum();
            compact(ps, params, stack)?;
            let after = params.get(stack).numel() + params.get(ps.theta_bar).numel();
            optim.reset_velocity(stack);
            optim.reset_velocity(ps.theta_bar);
            reports.push(CompactionReport {
                layer: name,
                mask_len,
                dynamic_count,
                masked_scalars_before: before,
                masked_scalars_after: after,
                aux_scalars,
            });
        }
        Ok(reports)
    }

    /// Write parameters, masks, and enough metadata to rebuild the model
    /// into one container file. `run` is free-form run state stored
    /// alongside.
    pub fn save(&self, path: &Path, cfg: &ExperimentConfig, run: serde_json::Value) -> Result<()> {
        let mut compacted = serde_json::Map::new();
        for block in &self.blocks {
            if let (Some(name), Some(ps)) = (block.pad_name(), block.pad_state()) {
                compacted.insert(name.to_string(), serde_json::Value::Bool(ps.compacted));
            }
        }
        let state = serde_json::json!({
            "config": cfg,
            "input": self.input,
            "class_count": self.class_count,
            "compacted": compacted,
            "run": run,
        });
        let mut c = Container::new(state);
        for (_, p) in self.params.iter() {
            c.insert_tensor(&p.name, p.value.clone())?;
        }
        for block in &self.blocks {
            if let (Some(name), Some(ps)) = (block.pad_name(), block.pad_state()) {
                c.insert_mask(&format!("{name}.mask"), ps.mask.clone())?;
            }
        }
        c.write(path)
    }

    /// Rebuild a model from a container written by [`Self::save`]. Returns
    /// the model, the config it was trained under, and the stored run state.
    pub fn load(path: &Path) -> Result<(Model, ExperimentConfig, serde_json::Value)> {
        let c = Container::read(path)?;
        let missing = |what: &str| PadError::Format {
            offset: 8,
            message: format!("checkpoint state is missing {what}"),
        };
        let cfg: ExperimentConfig =
            serde_json::from_value(c.state.get("config").cloned().ok_or_else(|| missing("the config"))?)?;
        cfg.validate()?;
        let input: FeatureShape =
            serde_json::from_value(c.state.get("input").cloned().ok_or_else(|| missing("the input shape"))?)?;
        let class_count = c
            .state
            .get("class_count")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| missing("the class count"))? as usize;
        let run = c.state.get("run").cloned().unwrap_or(serde_json::Value::Null);

        let mut model = Model::build(&cfg, input, class_count)?;

        // Restore masks and compaction flags first so expected parameter
        // shapes are known before any tensor is accepted.
        let mut expected: Vec<Vec<usize>> =
            model.params.iter().map(|(_, p)| p.value.shape().to_vec()).collect();
        for block in model.blocks.iter_mut() {
            let (name, stack, rows, ps) = match block {
                Block::DyConv { layer, pad: Some(ps) } => (layer.name.clone(), layer.kernels, layer.k, ps),
                Block::Moe { layer, pad: Some(ps) } => (layer.name.clone(), layer.expert_w, layer.m, ps),
                _ => continue,
            };
            let mask = c.mask(&format!("{name}.mask"))?.clone();
            if mask.len() != ps.mask.len() {
                return Err(PadError::ShapeMismatch {
                    op: "model_load",
                    detail: format!("stored mask length {} vs layer width {}", mask.len(), ps.mask.len()),
                });
            }
            let is_compacted = c
                .state
                .get("compacted")
                .and_then(|m| m.get(&name))
                .and_then(|v| v.as_bool())
                .unwrap_or(false);
            ps.mask = mask;
            if is_compacted {
                ps.compacted = true;
                ps.dyn_positions = ps.mask.dynamic_positions();
                ps.static_positions = ps.mask.static_positions();
                let dc = ps.mask.dynamic_count();
                expected[stack.index()] = vec![rows, dc];
                expected[ps.theta_bar.index()] = match ps.pad_mode {
                    PadMode::Partial => vec![ps.mask.len() - dc],
                    PadMode::PruneToZero => vec![0],
                };
            }
        }

        let names: Vec<(ParamId, String)> =
            model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in names {
            let stored = c.tensor(&name)?;
            if stored.shape() != expected[id.index()].as_slice() {
                return Err(PadError::ShapeMismatch {
                    op: "model_load",
                    detail: format!(
                        "parameter `{name}` stored with shape {:?}, expected {:?}",
                        stored.shape(),
                        expected[id.index()]
                    ),
                });
            }
            model.params.replace(id, stored.clone());
        }

        // Freezes were dropped by the tensor replacement; re-derive them for
        // layers that still carry full-width storage.
        let Model { blocks, params, .. } = &mut model;
        for block in blocks.iter_mut() {
            let (stack, rows, ps) = match block {
                Block::DyConv { layer, pad: Some(ps) } => (layer.kernels, layer.k, ps),
                Block::Moe { layer, pad: Some(ps) } => (layer.expert_w, layer.m, ps),
                _ => continue,
            };
            if ps.compacted {
                continue;
            }
            if ps.pad_mode == PadMode::Partial {
                ps.refresh_theta_bar_freeze(params)?;
            }
            refresh_stack_freeze(params, stack, rows, &ps.mask)?;
        }
        Ok((model, cfg, run))
    }
}

/// Row-wise argmax of a `[n, k]` tensor; ties go to the lower index.
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let (n, k) = match t.shape() {
        [n, k] => (*n, *k),
        s => {
            return Err(PadError::ShapeMismatch {
                op: "argmax_rows",
                detail: format!("expected rank 2, got {s:?}"),
            })
        }
    };
    let d = t.data();
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let row = &d[r * k..(r + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, DataSource, ModelConfig, PadConfig, TemperatureConfig, TrainConfig};
    use crate::partition::BudgetScope;

    fn image_config(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            seed: 5,
            data: DataConfig {
                source: DataSource::Gratings { classes: 3, n_train: 12, n_test: 6, side: 8 },
                normalize: false,
            },
            model: ModelConfig {
                layers: vec![
                    LayerConfig::DyConv { out_ch: 4, ksize: 3, stride: 2, pad: 1, kernels: 3 },
                    LayerConfig::Relu,
                    LayerConfig::GlobalPool,
                    LayerConfig::Linear { out_dim: 3 },
                ],
            },
            train: TrainConfig {
                epochs: 4,
                batch_size: 4,
                lr: 0.05,
                momentum: 0.0,
                weight_decay: 0.0,
                warmup_steps: 0,
                temperature: TemperatureConfig::default(),
                divergence_threshold: 1e4,
            },
            pad: PadConfig {
                method,
                kappa: 0.5,
                scope: BudgetScope::Global,
                lambda: LambdaMode::SumTwo,
                partition_epochs: if method == Method::FullyDynamic { vec![] } else { vec![1] },
                batches_per_step: 2,
                compact: true,
            },
        }
    }

    fn moe_config(method: Method) -> ExperimentConfig {
        let mut cfg = image_config(method);
        cfg.data.source = DataSource::Clusters { classes: 3, dim: 6, n_train: 12, n_test: 6, noise_std: 0.2 };
        cfg.model.layers = vec![
            LayerConfig::Moe { experts: 4, top_n: 2, hidden: 5 },
            LayerConfig::Linear { out_dim: 3 },
        ];
        cfg
    }

    fn image_batch(b: usize) -> Tensor {
        let data = (0..b * 8 * 8).map(|i| ((i as Float) * 0.37).sin() * 0.5).collect();
        Tensor::new(vec![b, 1, 8, 8], data).unwrap()
    }

    fn vector_batch(b: usize) -> Tensor {
        let data = (0..b * 6).map(|i| ((i as Float) * 0.53).cos()).collect();
        Tensor::new(vec![b, 6], data).unwrap()
    }

    #[test]
    fn build_infers_shapes_and_checks_the_head() {
        let cfg = image_config(Method::Imp);
        let model = Model::build(&cfg, FeatureShape::Image { c: 1, h: 8, w: 8 }, 3).unwrap();
        assert_eq!(model.pad_block_indices(), vec![0]);
        assert_eq!(model.pad_layer_names(), vec!["layer0.dyconv".to_string()]);

        match Model::build(&cfg, FeatureShape::Image { c: 1, h: 8, w: 8 }, 7) {
            Err(PadError::Config { field, .. }) => assert_eq!(field, "model.layers"),
            other => panic!("expected a head-width error, got {other:?}"),
        }

        let mut bad_cfg = image_config(Method::Imp);
        bad_cfg.model.layers.insert(0, LayerConfig::Linear { out_dim: 4 });
        match Model::build(&bad_cfg, FeatureShape::Image { c: 1, h: 8, w: 8 }, 3) {
            Err(PadError::Config { field, .. }) => assert_eq!(field, "model.layers[0]"),
            other => panic!("expected a placement error, got {other:?}"),
        }
    }

    #[test]
    fn fully_dynamic_build_has_no_partition_state() {
        let cfg = image_config(Method::FullyDynamic);
        let model = Model::build(&cfg, FeatureShape::Image { c: 1, h: 8, w: 8 }, 3).unwrap();
        assert!(model.pad_block_indices().is_empty());
        assert!(model.params.iter().all(|(_, p)| !p.name.contains("theta_bar") && !p.name.contains("lambda")));
    }

    #[test]
    fn prune_build_skips_lambda_parameters() {
        let cfg = image_config(Method::Prune);
        let model = Model::build(&cfg, FeatureShape::Image { c: 1, h: 8, w: 8 }, 3).unwrap();
        assert!(model.params.iter().any(|(_, p)| p.name.contains("theta_bar")));
        assert!(model.params.iter().all(|(_, p)| !p.name.contains("lambda")));
    }

    #[test]
    fn forward_produces_class_logits_and_mask_grads() {
        let cfg = image_config(Method::Imp);
        let model = Model::build(&cfg, FeatureShape::Image { c: 1, h: 8, w: 8 }, 3).unwrap();
        let mut g = Graph::new();
        let (loss, trace) = model.loss(&mut g, &image_batch(4), &[0, 1, 2, 0], 5.0, true).unwrap();
        assert_eq!(g.value(trace.logits).shape(), &[4, 3]);
        assert_eq!(trace.mask_vars.len(), 1);
        g.backward(loss).unwrap();
        let mg = g.grad(trace.mask_vars[0]).expect("mask gradient present");
        assert_eq!(mg.len(), 4 * 1 * 3 * 3);
        assert!(mg.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn moe_mask_gradient_spans_the_expert_row() {
        let cfg = moe_config(Method::Imp);
        let model = Model::build(&cfg, FeatureShape::Vector { d: 6 }, 3).unwrap();
        let mut g = Graph::new();
        let (loss, trace) = model.loss(&mut g, &vector_batch(5), &[0, 1, 2, 1, 0], 1.0, true).unwrap();
        g.backward(loss).unwrap();
        let mg = g.grad(trace.mask_vars[0]).expect("mask gradient present");
        assert_eq!(mg.len(), 2 * 6 * 5);
    }

    #[test]
    fn apply_masks_freezes_and_snapshots() {
        let cfg = image_config(Method::Imp);
        let mut model = Model::build(&cfg, FeatureShape::Image { c: 1, h: 8, w: 8 }, 3).unwrap();
        let m = 4 * 1 * 3 * 3;
        let mut bits = vec![0u8; m];
        for b in bits.iter_mut().take(m / 2) {
            *b = 1;
        }
        let mask = IndicatorMask::from_slice(&bits).unwrap();
        model.apply_masks(&[mask.clone()]).unwrap();

        let Block::DyConv { layer, pad: Some(ps) } = &model.blocks[0] else {
            panic!("expected a partitioned dynamic convolution")
        };
        assert_eq!(ps.mask, mask);

        let kernel_mask = model.params.update_mask(layer.kernels).unwrap();
        assert_eq!(kernel_mask.len(), 3 * m);
        for r in 0..3 {
            for j in 0..m {
                assert_eq!(kernel_mask[r * m + j], mask.bits()[j] as Float);
            }
        }

        let bar_mask = model.params.update_mask(ps.theta_bar).unwrap();
        let means = column_means(model.params.get(layer.kernels)).unwrap();
        let bar = model.params.get(ps.theta_bar).data();
        for j in 0..m {
            assert_eq!(bar_mask[j], 1.0 - mask.bits()[j] as Float);
            if !mask.is_dynamic(j) {
                assert_eq!(bar[j], means[j]);
            }
        }
    }

    #[test]
    fn compaction_preserves_the_forward_pass() {
        let cfg = image_config(Method::Imp);
        let mut model = Model::build(&cfg, FeatureShape::Image { c: 1, h: 8, w: 8 }, 3).unwrap();
        let m = 4 * 1 * 3 * 3;
        let bits: Vec<u8> = (0..m).map(|i| (i % 3 == 0) as u8).collect();
        model.apply_masks(&[IndicatorMask::from_slice(&bits).unwrap()]).unwrap();

        let x = image_batch(3);
        let before = model.logits_for(&x, 2.0).unwrap();
        let mut optim = OptimState::new(0.9, 0.0).unwrap();
        let reports = model.compact_all(&mut optim).unwrap();
        let after = model.logits_for(&x, 2.0).unwrap();

        assert_eq!(reports.len(), 1);
        let dc = bits.iter().filter(|&&b| b == 1).count();
        assert_eq!(reports[0].masked_scalars_before, 3 * m + m);
        assert_eq!(reports[0].masked_scalars_after, 3 * dc + (m - dc));
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        assert!(model.is_compacted());
        assert!(model.compact_all(&mut optim).is_err());
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = moe_config(Method::Imp);
        let mut model = Model::build(&cfg, FeatureShape::Vector { d: 6 }, 3).unwrap();
        let p = 2 * 6 * 5;
        let bits: Vec<u8> = (0..p).map(|i| (i % 2 == 0) as u8).collect();
        model.apply_masks(&[IndicatorMask::from_slice(&bits).unwrap()]).unwrap();
        model.save(&path, &cfg, serde_json::json!({ "epoch": 2 })).unwrap();

        let (loaded, loaded_cfg, run) = Model::load(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(run["epoch"], 2);
        for ((_, a), (_, b)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "parameter {} changed", a.name);
            }
            assert_eq!(a.update_mask, b.update_mask, "freeze state of {} changed", a.name);
        }
        assert_eq!(loaded.masks(), model.masks());

        let x = vector_batch(4);
        let la = model.logits_for(&x, 1.0).unwrap();
        let lb = loaded.logits_for(&x, 1.0).unwrap();
        for (a, b) in la.data().iter().zip(lb.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn save_load_round_trips_a_compacted_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("compact.ckpt");
        let cfg = image_config(Method::Imp);
        let mut model = Model::build(&cfg, FeatureShape::Image { c: 1, h: 8, w: 8 }, 3).unwrap();
        let m = 4 * 1 * 3 * 3;
        let bits: Vec<u8> = (0..m).map(|i| (i % 4 == 1) as u8).collect();
        model.apply_masks(&[IndicatorMask::from_slice(&bits).unwrap()]).unwrap();
        let mut optim = OptimState::new(0.0, 0.0).unwrap();
        model.compact_all(&mut optim).unwrap();
        model.save(&path, &cfg, serde_json::Value::Null).unwrap();

        let (loaded, _, _) = Model::load(&path).unwrap();
        assert!(loaded.is_compacted());
        let x = image_batch(2);
        let la = model.logits_for(&x, 3.0).unwrap();
        let lb = loaded.logits_for(&x, 3.0).unwrap();
        for (a, b) in la.data().iter().zip(lb.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_index() {
        let t = Tensor::new(vec![2, 3], vec![0.2, 0.7, 0.7, 0.5, 0.1, 0.4]).unwrap();
        assert_eq!(argmax_rows(&t).unwrap(), vec![1, 0]);
    }
}
