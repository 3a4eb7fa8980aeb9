//! Training and evaluation driver: loads data, builds the model, runs the
//! epoch loop with learning-rate and temperature schedules, fires partition
//! steps at their scheduled epochs, compacts at the end, and writes the run
//! artifacts (summary, per-epoch report, partition event log, checkpoint).
//!
//! `summary.json` and `partition_events.jsonl` contain no timing, so reruns
//! of the same config produce byte-identical files; wall-clock timings live
//! only in `report.csv`.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, Method};
use crate::data::{
    apply_norm, fit_norm, load_cifar_binary, load_idx_pair, moe_cluster_task, write_grating_idx, BatchIterator,
    Dataset,
};
use crate::error::{PadError, Result};
use crate::graph::Graph;
use crate::layers::TemperaturePlan;
use crate::model::{argmax_rows, FeatureShape, Model};
use crate::optim::{LrSchedule, OptimState};
use crate::pad::CompactionReport;
use crate::partition::{random_mask, run_schedule, MaskGradSource, PartitionEvent, PartitionPlan};
use crate::rng;
use crate::tensor::Float;

pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.csv";
pub const EVENTS_FILE: &str = "partition_events.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";

/// Shuffle-stream epoch offset for partition probe batches, far above any
/// real epoch index so probe batches never repeat a training permutation.
const PROBE_EPOCH_BASE: u64 = 1 << 40;

/// Materialize the configured train/test datasets. Synthetic sources are
/// generated under `workdir` (gratings go through real IDX files on disk).
pub fn load_datasets(cfg: &ExperimentConfig, workdir: &Path) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match &cfg.data.source {
        DataSource::Gratings { classes, n_train, n_test, side } => {
            let dir = workdir.join("gratings");
            let paths = write_grating_idx(&dir, *classes, *n_train, *n_test, *side, cfg.seed)?;
            (
                load_idx_pair(&paths.train_images, &paths.train_labels, *classes)?,
                load_idx_pair(&paths.test_images, &paths.test_labels, *classes)?,
            )
        }
        DataSource::Clusters { classes, dim, n_train, n_test, noise_std } => {
            moe_cluster_task(*classes, *dim, *n_train, *n_test, *noise_std, cfg.seed)?
        }
        DataSource::Idx { train_images, train_labels, test_images, test_labels, classes } => (
            load_idx_pair(train_images, train_labels, *classes)?,
            load_idx_pair(test_images, test_labels, *classes)?,
        ),
        DataSource::CifarBinary { train_files, test_files, train_subset, test_subset } => (
            load_cifar_binary(train_files, *train_subset, cfg.seed)?,
            load_cifar_binary(test_files, *test_subset, cfg.seed)?,
        ),
    };
    if cfg.data.normalize {
        if train.inputs.shape().len() != 4 {
            return Err(PadError::Config {
                field: "data.normalize".into(),
                message: "normalization is defined for image data only".into(),
            });
        }
        let stats = fit_norm(&train)?;
        apply_norm(&mut train, &stats)?;
        apply_norm(&mut test, &stats)?;
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy and mean cross-entropy over a dataset, forward passes only.
pub fn evaluate(model: &Model, ds: &Dataset, tau: Float, batch_size: usize) -> Result<EvalReport> {
    let mut it = BatchIterator::new(ds, batch_size, false, 0, 0)?;
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    while let Some(batch) = it.next_batch() {
        let (x, y) = batch?;
        let mut g = Graph::new();
        let (loss, trace) = model.loss(&mut g, &x, &y, tau, false)?;
        let preds = argmax_rows(g.value(trace.logits))?;
        correct += preds.iter().zip(&y).filter(|(p, t)| p == t).count();
        loss_sum += g.value(loss).item()? as f64 * y.len() as f64;
    }
    Ok(EvalReport { accuracy: correct as f64 / ds.len() as f64, mean_loss: loss_sum / ds.len() as f64 })
}

/// Load a checkpoint, regenerate its test set, and evaluate it at the
/// temperature the final training epoch used.
pub fn evaluate_checkpoint(path: &Path, workdir: &Path) -> Result<EvalReport> {
    let (model, cfg, _) = Model::load(path)?;
    let (_, test) = load_datasets(&cfg, workdir)?;
    let temp = TemperaturePlan::new(
        cfg.train.temperature.start as Float,
        cfg.train.temperature.end as Float,
        cfg.train.temperature.anneal_epochs,
    )?;
    let tau = temp.tau_at(cfg.train.epochs.saturating_sub(1));
    evaluate(&model, &test, tau, cfg.train.batch_size)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    pub lr_last: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerPartition {
    pub layer: String,
    pub mask_len: usize,
    pub dynamic_count: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaRecord {
    pub layer: String,
    pub lambda_d: f64,
    pub lambda_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub method: String,
    pub kappa: f64,
    pub seed: u64,
    pub train_examples: usize,
    pub test_examples: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_test_accuracy: f64,
    pub partition_events: Vec<PartitionEvent>,
    pub layer_partitions: Vec<LayerPartition>,
    pub lambda: Vec<LambdaRecord>,
    /// Scalars stored before any compaction.
    pub scalar_count: usize,
    pub compaction: Vec<CompactionReport>,
    pub compacted_scalar_count: Option<usize>,
    pub compacted_test_accuracy: Option<f64>,
}

/// Everything an observer sees after each optimizer step.
pub struct StepSnapshot<'a> {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub model: &'a Model,
}

/// Draws fresh shuffled batches and returns one batch worth of mask
/// gradients per call, rolling over to a new permutation when the dataset
/// runs out.
pub struct GradProbe<'a> {
    model: &'a Model,
    ds: &'a Dataset,
    batch_size: usize,
    tau: Float,
    seed: u64,
    next_epoch: u64,
    iter: Option<BatchIterator<'a>>,
}

impl<'a> GradProbe<'a> {
    pub fn new(model: &'a Model, ds: &'a Dataset, batch_size: usize, tau: Float, seed: u64) -> Self {
        GradProbe { model, ds, batch_size, tau, seed, next_epoch: 0, iter: None }
    }
}

impl MaskGradSource for GradProbe<'_> {
    fn mask_gradients(&mut self) -> Result<Vec<Vec<Float>>> {
        loop {
            if let Some(it) = &mut self.iter {
                if let Some(batch) = it.next_batch() {
                    let (x, y) = batch?;
                    let mut g = Graph::new();
                    let (loss, trace) = self.model.loss(&mut g, &x, &y, self.tau, true)?;
                    g.backward(loss)?;
                    let mut out = Vec::with_capacity(trace.mask_vars.len());
                    for &mv in &trace.mask_vars {
                        let grad = g
                            .grad(mv)
                            .ok_or_else(|| PadError::InvalidArgument("mask leaf received no gradient".into()))?;
                        out.push(grad.to_vec());
                    }
                    return Ok(out);
                }
            }
            self.iter =
                Some(BatchIterator::new(self.ds, self.batch_size, true, self.seed, PROBE_EPOCH_BASE + self.next_epoch)?);
            self.next_epoch += 1;
        }
    }
}

/// Train under the config, writing artifacts into `out_dir`.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    train_observed(cfg, out_dir, |_| {})
}

/// [`train`] with a per-step observer hook.
pub fn train_observed(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    mut observe: impl FnMut(StepSnapshot<'_>),
) -> Result<Summary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;

    let (train_ds, test_ds) = load_datasets(cfg, out_dir)?;
    let input = FeatureShape::of_inputs(&train_ds.inputs)?;
    let mut model = Model::build(cfg, input, train_ds.class_count)?;
    let mut optim = OptimState::new(cfg.train.momentum as Float, cfg.train.weight_decay as Float)?;

    let batch_size = cfg.train.batch_size;
    let batches_per_epoch = (train_ds.len() + batch_size - 1) / batch_size;
    let total_steps = cfg.train.epochs * batches_per_epoch;
    let sched = LrSchedule::new(cfg.train.lr as Float, cfg.train.warmup_steps, total_steps).map_err(|e| {
        PadError::Config { field: "train.warmup_steps".into(), message: e.to_string() }
    })?;
    let temp = TemperaturePlan::new(
        cfg.train.temperature.start as Float,
        cfg.train.temperature.end as Float,
        cfg.train.temperature.anneal_epochs,
    )?;
    let plan = if cfg.pad.method == Method::FullyDynamic {
        None
    } else {
        Some(PartitionPlan::new(cfg.pad.kappa, cfg.pad.partition_epochs.len(), cfg.pad.batches_per_step)?)
    };

    let mut events_file = fs::File::create(out_dir.join(EVENTS_FILE))?;
    let mut report = fs::File::create(out_dir.join(REPORT_FILE))?;
    writeln!(report, "epoch,tau,lr_last,train_loss,test_accuracy,test_loss,seconds")?;
    let started = Instant::now();

    let mut all_events: Vec<PartitionEvent> = Vec::new();
    let mut epoch_records: Vec<EpochRecord> = Vec::new();
    let mut global_step = 0usize;

    for epoch in 0..cfg.train.epochs {
        let tau = temp.tau_at(epoch);

        if let Some(pos) = cfg.pad.partition_epochs.iter().position(|&e| e == epoch) {
            let t = pos + 1;
            let mut step_events = Vec::new();
            if cfg.pad.method == Method::Random {
                let names = model.pad_layer_names();
                let mut masks = Vec::new();
                for (l, name) in names.iter().enumerate() {
                    let len = model.masks()[l].len();
                    let mut r = rng::substream(cfg.seed, "random-mask", l as u64);
                    let mask = random_mask(len, cfg.pad.kappa, &mut r)?;
                    step_events.push(PartitionEvent {
                        step: t,
                        layer: name.clone(),
                        target_ratio: cfg.pad.kappa,
                        mask_len: len,
                        kept: mask.dynamic_count(),
                        threshold_saliency: 0.0,
                    });
                    masks.push(mask);
                }
                model.apply_masks(&masks)?;
            } else {
                let plan = plan.as_ref().expect("partition epochs imply a plan");
                let ratio = plan.ratio_at(t)?;
                let step_plan = PartitionPlan::new(ratio, 1, cfg.pad.batches_per_step)?;
                let names = model.pad_layer_names();
                let mut masks = model.masks();
                {
                    let mut probe = GradProbe::new(&model, &train_ds, batch_size, tau, cfg.seed);
                    run_schedule(&mut probe, &mut masks, &names, &step_plan, cfg.pad.scope, |mut ev| {
                        ev.step = t;
                        step_events.push(ev);
                    })?;
                }
                model.apply_masks(&masks)?;
            }
            for ev in &step_events {
                writeln!(events_file, "{}", serde_json::to_string(ev)?)?;
            }
            all_events.extend(step_events);
        }

        let mut it = BatchIterator::new(&train_ds, batch_size, true, cfg.seed, epoch as u64)?;
        let mut loss_sum = 0.0f64;
        let mut last_lr = 0.0f64;
        while let Some(batch) = it.next_batch() {
            let (x, y) = batch?;
            let mut g = Graph::new();
            let (loss, trace) = model.loss(&mut g, &x, &y, tau, false)?;
            let loss_value = g.value(loss).item()? as f64;
            if !loss_value.is_finite() || loss_value > cfg.train.divergence_threshold {
                return Err(PadError::Diverged { epoch, loss: loss_value });
            }
            g.backward(loss)?;
            let grads = trace.binding.grads(&g);
            let lr = sched.lr_at(global_step)?;
            optim.sgd_step(&mut model.params, &grads, lr)?;
            global_step += 1;
            loss_sum += loss_value * y.len() as f64;
            last_lr = lr as f64;
            observe(StepSnapshot { epoch, step: global_step, loss: loss_value, lr: lr as f64, model: &model });
        }
        let train_loss = loss_sum / train_ds.len() as f64;
        let eval = evaluate(&model, &test_ds, tau, batch_size)?;
        epoch_records.push(EpochRecord {
            epoch,
            tau: tau as f64,
            lr_last: last_lr,
            train_loss,
            test_accuracy: eval.accuracy,
            test_loss: eval.mean_loss,
        });
        writeln!(
            report,
            "{},{},{},{},{},{},{:.3}",
            epoch,
            tau,
            last_lr,
            train_loss,
            eval.accuracy,
            eval.mean_loss,
            started.elapsed().as_secs_f64()
        )?;
    }

    let final_tau = temp.tau_at(cfg.train.epochs.saturating_sub(1));
    let final_test_accuracy = epoch_records.last().map(|r| r.test_accuracy).unwrap_or(0.0);
    let scalar_count = model.scalar_count();

    let mut compaction = Vec::new();
    let mut compacted_scalar_count = None;
    let mut compacted_test_accuracy = None;
    if cfg.pad.method != Method::FullyDynamic && cfg.pad.compact {
        compaction = model.compact_all(&mut optim)?;
        compacted_scalar_count = Some(model.scalar_count());
        compacted_test_accuracy = Some(evaluate(&model, &test_ds, final_tau, batch_size)?.accuracy);
    }

    let names = model.pad_layer_names();
    let layer_partitions = names
        .iter()
        .zip(model.masks())
        .map(|(layer, mask)| LayerPartition {
            layer: layer.clone(),
            mask_len: mask.len(),
            dynamic_count: mask.dynamic_count(),
            ratio: mask.ratio() as f64,
        })
        .collect();
    let lambda = model
        .blocks
        .iter()
        .filter_map(|b| match b {
            crate::model::Block::DyConv { layer, pad: Some(ps) } => Some((layer.name.clone(), ps)),
            crate::model::Block::Moe { layer, pad: Some(ps) } => Some((layer.name.clone(), ps)),
            _ => None,
        })
        .map(|(layer, ps)| {
            let (ld, ls) = ps.lambda.values(&model.params);
            LambdaRecord { layer, lambda_d: ld as f64, lambda_s: ls as f64 }
        })
        .collect();

    model.save(
        &out_dir.join(CHECKPOINT_FILE),
        cfg,
        serde_json::json!({ "epochs": cfg.train.epochs, "global_steps": global_step }),
    )?;

    let summary = Summary {
        method: cfg.pad.method.as_str().to_string(),
        kappa: cfg.pad.kappa,
        seed: cfg.seed,
        train_examples: train_ds.len(),
        test_examples: test_ds.len(),
        epochs: epoch_records,
        final_test_accuracy,
        partition_events: all_events,
        layer_partitions,
        lambda,
        scalar_count,
        compaction,
        compacted_scalar_count,
        compacted_test_accuracy,
    };
    fs::write(out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Run the same config across several seeds, each in its own subdirectory.
pub fn run_seeds(base: &ExperimentConfig, seeds: &[u64], workdir: &Path) -> Result<Vec<Summary>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        out.push(train(&cfg, &workdir.join(format!("seed{seed}")))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        DataConfig, LayerConfig, ModelConfig, PadConfig, TemperatureConfig, TrainConfig,
    };
    use crate::pad::LambdaMode;
    use crate::partition::BudgetScope;

    fn cluster_cfg(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            data: DataConfig {
                source: DataSource::Clusters { classes: 3, dim: 6, n_train: 24, n_test: 12, noise_std: 0.25 },
                normalize: false,
            },
            model: ModelConfig {
                layers: vec![
                    LayerConfig::Moe { experts: 4, top_n: 2, hidden: 5 },
                    LayerConfig::Linear { out_dim: 3 },
                ],
            },
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
                warmup_steps: 2,
                temperature: TemperatureConfig::default(),
                divergence_threshold: 1e4,
            },
            pad: PadConfig {
                method,
                kappa: 0.5,
                scope: BudgetScope::Global,
                lambda: LambdaMode::SumTwo,
                partition_epochs: match method {
                    Method::FullyDynamic => vec![],
                    Method::Imp => vec![1, 2],
                    _ => vec![1],
                },
                batches_per_step: 2,
                compact: true,
            },
        }
    }

    #[test]
    fn fully_dynamic_run_writes_identical_artifacts_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = cluster_cfg(Method::FullyDynamic);
        let summary = train(&cfg, &out).unwrap();
        assert_eq!(summary.epochs.len(), 3);
        assert!(summary.final_test_accuracy >= 0.0 && summary.final_test_accuracy <= 1.0);
        assert!(summary.partition_events.is_empty());
        assert!(summary.compacted_scalar_count.is_none());
        let first = fs::read(out.join(SUMMARY_FILE)).unwrap();

        let out2 = dir.path().join("rerun");
        train(&cfg, &out2).unwrap();
        let second = fs::read(out2.join(SUMMARY_FILE)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn iterative_run_partitions_compacts_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("imp");
        let cfg = cluster_cfg(Method::Imp);
        let summary = train(&cfg, &out).unwrap();

        let p = 2 * 6 * 5;
        assert_eq!(summary.partition_events.len(), 2);
        assert_eq!(summary.partition_events[0].step, 1);
        assert_eq!(summary.partition_events[1].step, 2);
        assert!(summary.partition_events[0].kept > summary.partition_events[1].kept);
        assert_eq!(summary.layer_partitions.len(), 1);
        assert_eq!(summary.layer_partitions[0].dynamic_count, p / 2);
        assert_eq!(summary.compaction.len(), 1);
        let after = summary.compacted_scalar_count.unwrap();
        assert!(after < summary.scalar_count);

        // One event line per partition step and layer.
        let events = fs::read_to_string(out.join(EVENTS_FILE)).unwrap();
        assert_eq!(events.lines().count(), 2);

        // The checkpoint reproduces the post-compaction accuracy.
        let report = evaluate_checkpoint(&out.join(CHECKPOINT_FILE), dir.path().join("eval").as_path()).unwrap();
        assert_eq!(Some(report.accuracy), summary.compacted_test_accuracy);
    }

    #[test]
    fn lambda_factors_stay_coupled_throughout_training() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cluster_cfg(Method::Mp);
        let mut checked = 0usize;
        train_observed(&cfg, &dir.path().join("mp"), |snap| {
            for block in &snap.model.blocks {
                if let crate::model::Block::Moe { pad: Some(ps), .. } = block {
                    let (ld, ls) = ps.lambda.values(&snap.model.params);
                    assert!((ld + ls - 2.0).abs() <= 1e-12);
                    checked += 1;
                }
            }
        })
        .unwrap();
        assert!(checked > 0);
    }

    #[test]
    fn random_method_hits_the_budget_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cluster_cfg(Method::Random);
        let summary = train(&cfg, &dir.path().join("rand")).unwrap();
        let p = 2 * 6 * 5;
        assert_eq!(summary.layer_partitions[0].dynamic_count, p / 2);
    }

    #[test]
    fn divergence_guard_reports_epoch_and_loss() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cluster_cfg(Method::FullyDynamic);
        cfg.train.divergence_threshold = 1e-12;
        match train(&cfg, &dir.path().join("blowup")) {
            Err(PadError::Diverged { epoch: 0, loss }) => assert!(loss > 0.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cluster_cfg(Method::FullyDynamic);
        let (train_ds, test_ds) = load_datasets(&cfg, dir.path()).unwrap();
        let model = Model::build(&cfg, FeatureShape::of_inputs(&train_ds.inputs).unwrap(), 3).unwrap();
        let a = evaluate(&model, &test_ds, 1.0, 8).unwrap();
        let b = evaluate(&model, &test_ds, 1.0, 8).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.mean_loss, b.mean_loss);
    }

    #[test]
    fn grating_pipeline_trains_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cluster_cfg(Method::Mp);
        cfg.data.source = DataSource::Gratings { classes: 3, n_train: 18, n_test: 9, side: 8 };
        cfg.data.normalize = true;
        cfg.model.layers = vec![
            LayerConfig::DyConv { out_ch: 4, ksize: 3, stride: 2, pad: 1, kernels: 3 },
            LayerConfig::Relu,
            LayerConfig::GlobalPool,
            LayerConfig::Linear { out_dim: 3 },
        ];
        cfg.train.epochs = 2;
        cfg.pad.partition_epochs = vec![1];
        let out = dir.path().join("grating");
        let summary = train(&cfg, &out).unwrap();
        assert_eq!(summary.layer_partitions[0].mask_len, 4 * 1 * 3 * 3);
        assert!(out.join("gratings").join("train-images.idx").exists());
    }
}
