//! Post-hoc measurement over trained models: per-layer parameter and output
//! variance across samples, dynamic-ratio distributions, exact parameter and
//! MAC accounting, and mask image export. All variances use the population
//! convention (divide by N).

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::conv::conv_out_dim;
use crate::data::{BatchIterator, Dataset};
use crate::error::{PadError, Result};
use crate::graph::Graph;
use crate::model::{Block, FeatureShape, Model};
use crate::pad::{IndicatorMask, PadMode, PadState};
use crate::params::ParamSet;
use crate::tensor::{Float, Tensor};

/// Streaming per-position mean and variance over rows of equal width.
#[derive(Debug, Clone)]
pub struct RunningVariance {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    pub fn new(width: usize) -> Self {
        RunningVariance { count: 0, mean: vec![0.0; width], m2: vec![0.0; width] }
    }

    pub fn push(&mut self, row: &[Float]) -> Result<()> {
        if row.len() != self.mean.len() {
            return Err(PadError::ShapeMismatch {
                op: "RunningVariance::push",
                detail: format!("row of {} values vs accumulator width {}", row.len(), self.mean.len()),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        for (j, &x) in row.iter().enumerate() {
            let x = x as f64;
            let delta = x - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (x - self.mean[j]);
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Population variance per position; zeros when nothing was pushed.
    pub fn variances(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|&m| m / self.count as f64).collect()
    }

    pub fn mean_variance(&self) -> f64 {
        if self.mean.is_empty() {
            return 0.0;
        }
        self.variances().iter().sum::<f64>() / self.mean.len() as f64
    }

    pub fn max_variance(&self) -> f64 {
        self.variances().iter().fold(0.0, |a, &b| a.max(b))
    }
}

/// Per-sample effective parameter vectors at full (pre-compaction) length:
/// `mix [b, rows] × stack [rows, cols]` for dynamic positions, the static
/// copy (or zero, for prune-mode layers) elsewhere. Static positions get the
/// identical float for every sample, so their streamed variance is exactly 0.
pub fn effective_rows(mix: &Tensor, stack: &Tensor, ps: Option<&PadState>, params: &ParamSet) -> Result<Vec<Vec<Float>>> {
    let (b, rows) = match *mix.shape() {
        [b, r] => (b, r),
        _ => {
            return Err(PadError::ShapeMismatch {
                op: "effective_rows",
                detail: format!("mixing coefficients must be rank 2, got {:?}", mix.shape()),
            })
        }
    };
    let cols = match *stack.shape() {
        [r, c] if r == rows => c,
        _ => {
            return Err(PadError::ShapeMismatch {
                op: "effective_rows",
                detail: format!("stack {:?} does not match {rows} mixing columns", stack.shape()),
            })
        }
    };
    let mixed = |i: usize, col: usize| -> Float {
        let mut acc: Float = 0.0;
        for r in 0..rows {
            acc += mix.data()[i * rows + r] * stack.data()[r * cols + col];
        }
        acc
    };

    let mut out = Vec::with_capacity(b);
    match ps {
        None => {
            for i in 0..b {
                out.push((0..cols).map(|j| mixed(i, j)).collect());
            }
        }
        Some(ps) => {
            let m = ps.mask.len();
            let (lambda_d, lambda_s) = ps.lambda.values(params);
            let theta_bar = params.get(ps.theta_bar);
            let mut col_of = vec![usize::MAX; m];
            let mut static_of = vec![usize::MAX; m];
            if ps.compacted {
                for (rank, &j) in ps.mask.dynamic_positions().iter().enumerate() {
                    col_of[j] = rank;
                }
                for (rank, &j) in ps.mask.static_positions().iter().enumerate() {
                    static_of[j] = rank;
                }
            } else {
                for j in 0..m {
                    col_of[j] = j;
                    static_of[j] = j;
                }
            }
            for i in 0..b {
                let mut row = Vec::with_capacity(m);
                for j in 0..m {
                    if ps.mask.is_dynamic(j) {
                        row.push(lambda_d * mixed(i, col_of[j]));
                    } else {
                        row.push(match ps.pad_mode {
                            PadMode::Partial => lambda_s * theta_bar.data()[static_of[j]],
                            PadMode::PruneToZero => 0.0,
                        });
                    }
                }
                out.push(row);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerParamVariance {
    pub layer: String,
    pub dynamic: bool,
    /// Effective parameter vector length for dynamic layers; stored scalar
    /// count for static ones.
    pub positions: usize,
    pub mean_variance: f64,
    pub max_variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerOutputVariance {
    pub layer: String,
    pub units: usize,
    pub mean_variance: f64,
    pub max_variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    pub samples: usize,
    pub parameter: Vec<LayerParamVariance>,
    pub output: Vec<LayerOutputVariance>,
}

impl VarianceReport {
    pub fn parameter_csv(&self) -> String {
        let mut s = String::from("layer,dynamic,positions,mean_variance,max_variance\n");
        for r in &self.parameter {
            s.push_str(&format!("{},{},{},{},{}\n", r.layer, r.dynamic, r.positions, r.mean_variance, r.max_variance));
        }
        s
    }

    pub fn output_csv(&self) -> String {
        let mut s = String::from("layer,units,mean_variance,max_variance\n");
        for r in &self.output {
            s.push_str(&format!("{},{},{},{}\n", r.layer, r.units, r.mean_variance, r.max_variance));
        }
        s
    }
}

/// Parameter variance (per dynamic layer: variance across samples of each
/// effective parameter, averaged over positions) and output variance (per
/// block: variance across samples of each post-activation unit, averaged
/// over units) for every sample in `ds`.
pub fn variance_report(model: &Model, ds: &Dataset, tau: Float, batch_size: usize) -> Result<VarianceReport> {
    if ds.len() < 2 {
        return Err(PadError::InvalidArgument(format!(
            "variance needs at least two samples, got {}",
            ds.len()
        )));
    }
    let labels = model.block_labels();
    let mut param_acc: Vec<Option<RunningVariance>> = Vec::new();
    for block in &model.blocks {
        param_acc.push(match block {
            Block::DyConv { layer, .. } => Some(RunningVariance::new(layer.kernel_len())),
            Block::Moe { layer, .. } => Some(RunningVariance::new(layer.expert_len())),
            _ => None,
        });
    }
    let mut out_acc: Vec<Option<RunningVariance>> = vec![None; model.blocks.len()];

    let mut it = BatchIterator::new(ds, batch_size, false, 0, 0)?;
    while let Some(batch) = it.next_batch() {
        let (x, _) = batch?;
        let mut g = Graph::new();
        let input = g.leaf(x);
        let trace = model.forward(&mut g, input, tau, false)?;

        let mut mix_iter = trace.mixes.iter();
        for (bi, block) in model.blocks.iter().enumerate() {
            let (stack_id, ps) = match block {
                Block::DyConv { layer, pad } => (layer.kernels, pad.as_ref()),
                Block::Moe { layer, pad } => (layer.expert_w, pad.as_ref()),
                _ => continue,
            };
            let mix = g.value(*mix_iter.next().expect("one mix per dynamic block"));
            let rows = effective_rows(mix, model.params.get(stack_id), ps, &model.params)?;
            let acc = param_acc[bi].as_mut().expect("dynamic block has an accumulator");
            for row in &rows {
                acc.push(row)?;
            }
        }

        for (bi, &var) in trace.block_outputs.iter().enumerate() {
            let t = g.value(var);
            let b = t.shape()[0];
            let units = t.numel() / b;
            let acc = out_acc[bi].get_or_insert_with(|| RunningVariance::new(units));
            for i in 0..b {
                acc.push(&t.data()[i * units..(i + 1) * units])?;
            }
        }
    }

    let mut parameter = Vec::new();
    for (bi, block) in model.blocks.iter().enumerate() {
        match block {
            Block::DyConv { .. } | Block::Moe { .. } => {
                let acc = param_acc[bi].as_ref().expect("dynamic block has an accumulator");
                parameter.push(LayerParamVariance {
                    layer: labels[bi].clone(),
                    dynamic: true,
                    positions: acc.mean.len(),
                    mean_variance: acc.mean_variance(),
                    max_variance: acc.max_variance(),
                });
            }
            Block::Conv(layer) => parameter.push(static_param_entry(&labels[bi], &model.params, &[layer.w, layer.b])),
            Block::Linear(layer) => parameter.push(static_param_entry(&labels[bi], &model.params, &[layer.w, layer.b])),
            Block::Ffn(layer) => {
                parameter.push(static_param_entry(&labels[bi], &model.params, &[layer.w1, layer.b1, layer.w2, layer.b2]))
            }
            Block::Relu | Block::GlobalPool => {}
        }
    }
    let output = out_acc
        .into_iter()
        .enumerate()
        .map(|(bi, acc)| {
            let acc = acc.expect("every block produced output");
            LayerOutputVariance {
                layer: labels[bi].clone(),
                units: acc.mean.len(),
                mean_variance: acc.mean_variance(),
                max_variance: acc.max_variance(),
            }
        })
        .collect();
    Ok(VarianceReport { samples: ds.len(), parameter, output })
}

fn static_param_entry(layer: &str, params: &ParamSet, ids: &[crate::params::ParamId]) -> LayerParamVariance {
    let positions = ids.iter().map(|&id| params.get(id).numel()).sum();
    LayerParamVariance { layer: layer.to_string(), dynamic: false, positions, mean_variance: 0.0, max_variance: 0.0 }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerRatio {
    pub layer: String,
    pub mask_len: usize,
    pub dynamic_count: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioDistribution {
    pub layers: Vec<LayerRatio>,
    /// Total dynamic positions over total positions (parameter-weighted
    /// mean of the per-layer ratios).
    pub weighted_mean: f64,
}

impl RatioDistribution {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mask_len,dynamic_count,ratio\n");
        for r in &self.layers {
            s.push_str(&format!("{},{},{},{}\n", r.layer, r.mask_len, r.dynamic_count, r.ratio));
        }
        s
    }
}

pub fn ratio_distribution(model: &Model) -> RatioDistribution {
    let names = model.pad_layer_names();
    let masks = model.masks();
    let layers: Vec<LayerRatio> = names
        .into_iter()
        .zip(masks)
        .map(|(layer, mask)| LayerRatio {
            layer,
            mask_len: mask.len(),
            dynamic_count: mask.dynamic_count(),
            ratio: mask.ratio() as f64,
        })
        .collect();
    let total: usize = layers.iter().map(|l| l.mask_len).sum();
    let dynamic: usize = layers.iter().map(|l| l.dynamic_count).sum();
    let weighted_mean = if total == 0 { 0.0 } else { dynamic as f64 / total as f64 };
    RatioDistribution { layers, weighted_mean }
}

#[derive(Debug, Clone, Serialize)]
pub struct PartCount {
    pub part: String,
    pub scalars: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerAccount {
    pub layer: String,
    pub kind: String,
    pub params: usize,
    /// Multiply-accumulates for one sample's forward pass.
    pub macs: usize,
    pub parts: Vec<PartCount>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AccountingTable {
    pub layers: Vec<LayerAccount>,
    pub total_params: usize,
    pub total_macs: usize,
}

impl AccountingTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,params,macs\n");
        for r in &self.layers {
            s.push_str(&format!("{},{},{},{}\n", r.layer, r.kind, r.params, r.macs));
        }
        s.push_str(&format!("total,,{},{}\n", self.total_params, self.total_macs));
        s
    }
}

/// Exact stored scalars per layer (the totals match what a checkpoint
/// serializes) and MACs for one forward pass at the model's input shape.
/// Conventions: bias additions, elementwise mask/scale application, pooling,
/// and softmax are not MACs; expert mixtures are costed at their routed
/// `top_n` experts; dynamic-convolution aggregation is costed per stored
/// kernel column, so compaction shrinks it from `k·m` to `k·dynamic_count`.
pub fn account(model: &Model) -> Result<AccountingTable> {
    let labels = model.block_labels();
    let params = &model.params;
    let numel = |id: crate::params::ParamId| params.get(id).numel();
    let mut shape = model.input;
    let mut layers = Vec::new();

    for (bi, block) in model.blocks.iter().enumerate() {
        let layer = labels[bi].clone();
        let (kind, parts, macs, next): (&str, Vec<PartCount>, usize, FeatureShape) = match block {
            Block::Conv(l) => {
                let (h, w) = match shape {
                    FeatureShape::Image { h, w, .. } => (h, w),
                    FeatureShape::Vector { .. } => return Err(bad_shape(&layer, "image input")),
                };
                let oh = conv_out_dim(h, l.kh, l.stride, l.pad)?;
                let ow = conv_out_dim(w, l.kw, l.stride, l.pad)?;
                let macs = oh * ow * l.out_ch * l.in_ch * l.kh * l.kw;
                let parts = vec![part("weights", numel(l.w)), part("bias", numel(l.b))];
                ("conv", parts, macs, FeatureShape::Image { c: l.out_ch, h: oh, w: ow })
            }
            Block::DyConv { layer: l, pad } => {
                let (h, w) = match shape {
                    FeatureShape::Image { h, w, .. } => (h, w),
                    FeatureShape::Vector { .. } => return Err(bad_shape(&layer, "image input")),
                };
                let oh = conv_out_dim(h, l.kh, l.stride, l.pad)?;
                let ow = conv_out_dim(w, l.kw, l.stride, l.pad)?;
                let attn_params = numel(l.attn_w1) + numel(l.attn_b1) + numel(l.attn_w2) + numel(l.attn_b2);
                let attn_macs = numel(l.attn_w1) + numel(l.attn_w2);
                let stored_cols = params.get(l.kernels).shape()[1];
                let mut parts =
                    vec![part("kernels", numel(l.kernels)), part("bias", numel(l.bias)), part("attention", attn_params)];
                if let Some(ps) = pad {
                    parts.push(part("static", numel(ps.theta_bar)));
                    parts.push(part("lambda", ps.lambda.param_ids().iter().map(|&id| numel(id)).sum()));
                }
                let macs = attn_macs + l.k * stored_cols + oh * ow * l.out_ch * l.in_ch * l.kh * l.kw;
                ("dy_conv", parts, macs, FeatureShape::Image { c: l.out_ch, h: oh, w: ow })
            }
            Block::Linear(l) => {
                let d = vector_dim(&shape, &layer)?;
                let parts = vec![part("weights", numel(l.w)), part("bias", numel(l.b))];
                ("linear", parts, d * l.out_features, FeatureShape::Vector { d: l.out_features })
            }
            Block::Ffn(l) => {
                let d = vector_dim(&shape, &layer)?;
                let parts = vec![
                    part("w1", numel(l.w1)),
                    part("b1", numel(l.b1)),
                    part("w2", numel(l.w2)),
                    part("b2", numel(l.b2)),
                ];
                ("ffn", parts, d * l.h + l.h * l.d, FeatureShape::Vector { d: l.d })
            }
            Block::Moe { layer: l, pad } => {
                let d = vector_dim(&shape, &layer)?;
                let mut parts = vec![
                    part("experts", numel(l.expert_w)),
                    part("gate", numel(l.gate_w)),
                    part("expert_bias", numel(l.b1) + numel(l.b2)),
                ];
                if let Some(ps) = pad {
                    parts.push(part("static", numel(ps.theta_bar)));
                    parts.push(part("lambda", ps.lambda.param_ids().iter().map(|&id| numel(id)).sum()));
                }
                let macs = d * l.m + l.n * (d * l.h + l.h * l.d);
                ("moe", parts, macs, FeatureShape::Vector { d: l.d })
            }
            Block::Relu => ("relu", Vec::new(), 0, shape),
            Block::GlobalPool => {
                let c = match shape {
                    FeatureShape::Image { c, .. } => c,
                    FeatureShape::Vector { .. } => return Err(bad_shape(&layer, "image input")),
                };
                ("global_pool", Vec::new(), 0, FeatureShape::Vector { d: c })
            }
        };
        let params_total = parts.iter().map(|p| p.scalars).sum();
        layers.push(LayerAccount { layer, kind: kind.to_string(), params: params_total, macs, parts });
        shape = next;
    }

    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    Ok(AccountingTable { layers, total_params, total_macs })
}

fn part(name: &str, scalars: usize) -> PartCount {
    PartCount { part: name.to_string(), scalars }
}

fn vector_dim(shape: &FeatureShape, layer: &str) -> Result<usize> {
    match shape {
        FeatureShape::Vector { d } => Ok(*d),
        FeatureShape::Image { .. } => Err(bad_shape(layer, "vector input")),
    }
}

fn bad_shape(layer: &str, want: &str) -> PadError {
    PadError::InvalidArgument(format!("{layer} needs {want} for accounting"))
}

/// Write a mask as a binary PGM image: dynamic positions are black (0),
/// static positions white (255), row-major in the given 2-D shape.
pub fn write_mask_pgm(mask: &IndicatorMask, rows: usize, cols: usize, path: &Path) -> Result<()> {
    if rows * cols != mask.len() || mask.is_empty() {
        return Err(PadError::ShapeMismatch {
            op: "write_mask_pgm",
            detail: format!("{rows}x{cols} image vs mask of {} positions", mask.len()),
        });
    }
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(mask.bits().iter().map(|&b| if b == 1 { 0u8 } else { 255u8 }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a mask written by [`write_mask_pgm`]; returns the bits and the
/// `(rows, cols)` shape. Only pure black/white maxval-255 images qualify.
pub fn read_mask_pgm(path: &Path) -> Result<(IndicatorMask, usize, usize)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(PadError::Format { offset: 0, message: format!("expected P5 image, got {magic:?}") });
    }
    let cols = parse_dim(&next_token(&bytes, &mut pos)?, pos)?;
    let rows = parse_dim(&next_token(&bytes, &mut pos)?, pos)?;
    let maxval = next_token(&bytes, &mut pos)?;
    if maxval != "255" {
        return Err(PadError::Format { offset: pos as u64, message: format!("expected maxval 255, got {maxval}") });
    }
    pos += 1;
    let n = rows * cols;
    if bytes.len() != pos + n {
        return Err(PadError::Format {
            offset: pos as u64,
            message: format!("expected {n} pixel bytes, found {}", bytes.len().saturating_sub(pos)),
        });
    }
    let mut bits = Vec::with_capacity(n);
    for (i, &px) in bytes[pos..].iter().enumerate() {
        bits.push(match px {
            0 => 1u8,
            255 => 0u8,
            other => {
                return Err(PadError::Format {
                    offset: (pos + i) as u64,
                    message: format!("pixel must be 0 or 255, got {other}"),
                })
            }
        });
    }
    Ok((IndicatorMask::from_slice(&bits)?, rows, cols))
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PadError::Format { offset: start as u64, message: "truncated image header".into() });
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_dim(tok: &str, offset: usize) -> Result<usize> {
    let v: usize = tok
        .parse()
        .map_err(|_| PadError::Format { offset: offset as u64, message: format!("bad image dimension {tok:?}") })?;
    if v == 0 {
        return Err(PadError::Format { offset: offset as u64, message: "image dimensions must be positive".into() });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Container;
    use crate::config::{
        DataConfig, DataSource, ExperimentConfig, LayerConfig, Method, ModelConfig, PadConfig, TemperatureConfig,
        TrainConfig,
    };
    use crate::data::moe_cluster_task;
    use crate::optim::OptimState;
    use crate::pad::LambdaMode;
    use crate::partition::{random_mask, BudgetScope};
    use crate::rng;

    fn dyconv_cfg(kappa: f64) -> ExperimentConfig {
        ExperimentConfig {
            seed: 11,
            data: DataConfig {
                source: DataSource::Gratings { classes: 3, n_train: 12, n_test: 6, side: 8 },
                normalize: false,
            },
            model: ModelConfig {
                layers: vec![
                    LayerConfig::DyConv { out_ch: 8, ksize: 3, stride: 1, pad: 1, kernels: 4 },
                    LayerConfig::Relu,
                    LayerConfig::GlobalPool,
                    LayerConfig::Linear { out_dim: 3 },
                ],
            },
            train: TrainConfig {
                epochs: 3,
                batch_size: 4,
                lr: 0.05,
                momentum: 0.0,
                weight_decay: 0.0,
                warmup_steps: 0,
                temperature: TemperatureConfig::default(),
                divergence_threshold: 1e4,
            },
            pad: PadConfig {
                method: Method::Mp,
                kappa,
                scope: BudgetScope::Global,
                lambda: LambdaMode::SumTwo,
                partition_epochs: vec![1],
                batches_per_step: 2,
                compact: true,
            },
        }
    }

    fn moe_cfg(kappa: f64) -> ExperimentConfig {
        let mut cfg = dyconv_cfg(kappa);
        cfg.data.source = DataSource::Clusters { classes: 3, dim: 6, n_train: 12, n_test: 8, noise_std: 0.2 };
        cfg.model.layers =
            vec![LayerConfig::Moe { experts: 4, top_n: 2, hidden: 5 }, LayerConfig::Linear { out_dim: 3 }];
        cfg
    }

    #[test]
    fn running_variance_pins_two_point_examples() {
        let mut acc = RunningVariance::new(1);
        acc.push(&[0.0]).unwrap();
        acc.push(&[2.0]).unwrap();
        assert_eq!(acc.variances(), vec![1.0]);

        let mut acc = RunningVariance::new(2);
        acc.push(&[-1.0, 5.0]).unwrap();
        acc.push(&[1.0, 5.0]).unwrap();
        assert_eq!(acc.variances(), vec![1.0, 0.0]);
        assert_eq!(acc.mean_variance(), 0.5);
        assert_eq!(acc.max_variance(), 1.0);
    }

    #[test]
    fn one_hot_mixes_over_kernels_zero_and_two_give_unit_variance() {
        let mix = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let stack = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let params = ParamSet::new();
        let rows = effective_rows(&mix, &stack, None, &params).unwrap();
        let mut acc = RunningVariance::new(1);
        for row in &rows {
            acc.push(row).unwrap();
        }
        assert_eq!(acc.variances(), vec![1.0]);
    }

    #[test]
    fn all_static_layer_reports_exactly_zero_parameter_variance() {
        let cfg = moe_cfg(0.0);
        let (_, test) = moe_cluster_task(3, 6, 12, 8, 0.2, cfg.seed).unwrap();
        let mut model = Model::build(&cfg, FeatureShape::Vector { d: 6 }, 3).unwrap();
        let p = 2 * 6 * 5;
        let all_static = IndicatorMask::zeros(p);
        model.apply_masks(&[all_static]).unwrap();
        let report = variance_report(&model, &test, 1.0, 4).unwrap();
        let moe = report.parameter.iter().find(|r| r.dynamic).unwrap();
        assert_eq!(moe.mean_variance, 0.0);
        assert_eq!(moe.max_variance, 0.0);
        let linear = report.parameter.iter().find(|r| !r.dynamic).unwrap();
        assert_eq!(linear.mean_variance, 0.0);
    }

    /// Experts start from one shared draw, so an untrained mixture has
    /// sample-independent effective parameters; spread the rows apart first.
    fn separate_experts(model: &mut Model) {
        let id = match &model.blocks[0] {
            Block::Moe { layer, .. } => layer.expert_w,
            _ => unreachable!(),
        };
        let t = model.params.get(id);
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let data: Vec<Float> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + 0.3 * (i / cols) as Float)
            .collect();
        model.params.replace(id, Tensor::new(vec![rows, cols], data).unwrap());
    }

    #[test]
    fn partial_layer_keeps_static_positions_at_zero_and_dynamic_above() {
        let cfg = moe_cfg(0.5);
        let (_, test) = moe_cluster_task(3, 6, 12, 8, 0.2, cfg.seed).unwrap();
        let mut model = Model::build(&cfg, FeatureShape::Vector { d: 6 }, 3).unwrap();
        separate_experts(&mut model);
        let p = 2 * 6 * 5;
        let mask = random_mask(p, 0.5, &mut rng::stream(7, "test-mask")).unwrap();
        model.apply_masks(&[mask.clone()]).unwrap();

        let report = variance_report(&model, &test, 1.0, 4).unwrap();
        let moe = report.parameter.iter().find(|r| r.dynamic).unwrap();
        assert!(moe.mean_variance > 0.0);

        // Per-position check through the same public pieces the report uses.
        let mut g = Graph::new();
        let input = g.leaf(test.inputs.clone());
        let trace = model.forward(&mut g, input, 1.0, false).unwrap();
        let (stack_id, ps) = match &model.blocks[0] {
            Block::Moe { layer, pad } => (layer.expert_w, pad.as_ref()),
            _ => unreachable!(),
        };
        let rows = effective_rows(g.value(trace.mixes[0]), model.params.get(stack_id), ps, &model.params).unwrap();
        let mut acc = RunningVariance::new(p);
        for row in &rows {
            acc.push(row).unwrap();
        }
        let vars = acc.variances();
        for j in 0..p {
            if mask.is_dynamic(j) {
                assert!(vars[j] > 0.0, "dynamic position {j} should vary");
            } else {
                assert_eq!(vars[j], 0.0, "static position {j} must not vary");
            }
        }
    }

    #[test]
    fn duplicated_samples_give_zero_output_variance_everywhere() {
        let cfg = moe_cfg(0.5);
        let model = Model::build(&cfg, FeatureShape::Vector { d: 6 }, 3).unwrap();
        let row: Vec<Float> = (0..6).map(|i| 0.3 * i as Float - 0.7).collect();
        let inputs = Tensor::new(vec![4, 6], row.repeat(4)).unwrap();
        let ds = Dataset::new(inputs, vec![0, 1, 2, 0], 3).unwrap();
        let report = variance_report(&model, &ds, 1.0, 2).unwrap();
        for out in &report.output {
            assert_eq!(out.mean_variance, 0.0, "layer {} varied on identical inputs", out.layer);
        }
        for p in &report.parameter {
            assert_eq!(p.mean_variance, 0.0);
        }
    }

    #[test]
    fn variance_needs_two_samples() {
        let cfg = moe_cfg(0.5);
        let model = Model::build(&cfg, FeatureShape::Vector { d: 6 }, 3).unwrap();
        let ds = Dataset::new(Tensor::new(vec![1, 6], vec![0.1; 6]).unwrap(), vec![0], 3).unwrap();
        let err = variance_report(&model, &ds, 1.0, 2).unwrap_err();
        assert!(matches!(err, PadError::InvalidArgument(_)));
    }

    #[test]
    fn accounting_pins_static_conv_and_compacted_dyconv_counts() {
        let mut cfg = dyconv_cfg(0.25);
        cfg.model.layers[0] = LayerConfig::Conv { out_ch: 8, ksize: 3, stride: 1, pad: 1 };
        cfg.pad.method = Method::FullyDynamic;
        cfg.pad.partition_epochs = vec![];
        let model = Model::build(&cfg, FeatureShape::Image { c: 4, h: 8, w: 8 }, 3).unwrap();
        let table = account(&model).unwrap();
        let conv = &table.layers[0];
        assert_eq!(conv.kind, "conv");
        assert_eq!(conv.parts[0].scalars, 288);
        assert_eq!(conv.parts[1].scalars, 8);
        assert_eq!(conv.macs, 8 * 8 * 8 * 4 * 3 * 3);
        assert_eq!(table.total_params, model.scalar_count());

        let cfg = dyconv_cfg(0.25);
        let mut model = Model::build(&cfg, FeatureShape::Image { c: 4, h: 8, w: 8 }, 3).unwrap();
        let m = 8 * 4 * 3 * 3;
        let mask = random_mask(m, 0.25, &mut rng::stream(5, "test-mask")).unwrap();
        model.apply_masks(&[mask]).unwrap();
        let mut optim = OptimState::new(0.0, 0.0).unwrap();
        model.compact_all(&mut optim).unwrap();

        let table = account(&model).unwrap();
        let dy = &table.layers[0];
        let kernels = dy.parts.iter().find(|p| p.part == "kernels").unwrap().scalars;
        let stat = dy.parts.iter().find(|p| p.part == "static").unwrap().scalars;
        assert_eq!(kernels, 4 * 72);
        assert_eq!(stat, 216);
        assert_eq!(kernels + stat, 504);
        assert_eq!(table.total_params, model.scalar_count());
    }

    #[test]
    fn accounting_totals_match_checkpoint_scalars() {
        let cfg = moe_cfg(0.5);
        let mut model = Model::build(&cfg, FeatureShape::Vector { d: 6 }, 3).unwrap();
        let p = 2 * 6 * 5;
        model.apply_masks(&[random_mask(p, 0.5, &mut rng::stream(9, "test-mask")).unwrap()]).unwrap();
        let mut optim = OptimState::new(0.0, 0.0).unwrap();
        model.compact_all(&mut optim).unwrap();

        let table = account(&model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path, &cfg, serde_json::json!({})).unwrap();
        let container = Container::read(&path).unwrap();
        assert_eq!(table.total_params, container.dense_scalar_count());
    }

    #[test]
    fn compaction_endpoints_store_all_kernels_or_only_the_static_copy() {
        for (kappa, want_kernels, want_static) in [(1.0, 4 * 288, 0), (0.0, 0, 288)] {
            let cfg = dyconv_cfg(if kappa == 0.0 { 0.25 } else { kappa });
            let mut model = Model::build(&cfg, FeatureShape::Image { c: 4, h: 8, w: 8 }, 3).unwrap();
            let mask = random_mask(288, kappa, &mut rng::stream(3, "test-mask")).unwrap();
            model.apply_masks(&[mask]).unwrap();
            let mut optim = OptimState::new(0.0, 0.0).unwrap();
            model.compact_all(&mut optim).unwrap();
            let table = account(&model).unwrap();
            let dy = &table.layers[0];
            let kernels = dy.parts.iter().find(|p| p.part == "kernels").unwrap().scalars;
            let stat = dy.parts.iter().find(|p| p.part == "static").unwrap().scalars;
            assert_eq!(kernels, want_kernels);
            assert_eq!(stat, want_static);
        }
    }

    #[test]
    fn ratio_distribution_weights_layers_by_size() {
        let mut cfg = moe_cfg(0.5);
        cfg.model.layers.insert(1, LayerConfig::Moe { experts: 2, top_n: 1, hidden: 3 });
        let mut model = Model::build(&cfg, FeatureShape::Vector { d: 6 }, 3).unwrap();
        let p0 = 2 * 6 * 5;
        let p1 = 2 * 6 * 3;
        let mut m0 = IndicatorMask::zeros(p0);
        for j in 0..30 {
            m0.set(j, true);
        }
        let m1 = IndicatorMask::ones(p1);
        model.apply_masks(&[m0, m1]).unwrap();
        let dist = ratio_distribution(&model);
        assert_eq!(dist.layers.len(), 2);
        assert_eq!(dist.layers[0].dynamic_count, 30);
        assert_eq!(dist.layers[1].ratio, 1.0);
        let want = (30 + p1) as f64 / (p0 + p1) as f64;
        assert!((dist.weighted_mean - want).abs() < 1e-15);
        assert!(dist.to_csv().lines().count() == 3);
    }

    #[test]
    fn mask_images_round_trip_and_reject_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mask = IndicatorMask::from_slice(&[1, 0, 0, 1]).unwrap();
        write_mask_pgm(&mask, 2, 2, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 255, 0]);
        let (back, rows, cols) = read_mask_pgm(&path).unwrap();
        assert_eq!(back.bits(), mask.bits());
        assert_eq!((rows, cols), (2, 2));

        assert!(write_mask_pgm(&mask, 3, 2, &path).is_err());

        let mut corrupt = fs::read(&path).unwrap();
        let last = corrupt.len() - 1;
        corrupt[last] = 7;
        fs::write(&path, corrupt).unwrap();
        match read_mask_pgm(&path) {
            Err(PadError::Format { message, .. }) => assert!(message.contains("0 or 255")),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
