//! Experiment configuration: the JSON schema, validation that names the
//! first offending field, and the small set of command-line overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};
use crate::pad::LambdaMode;
use crate::partition::BudgetScope;

fn bad(field: &str, message: impl Into<String>) -> PadError {
    PadError::Config { field: field.to_string(), message: message.into() }
}

/// How the dynamic layers are trained and partitioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Every parameter stays dynamic; no masks, no static copies.
    FullyDynamic,
    /// Iterative partition: the keep budget shrinks geometrically over the
    /// scheduled epochs, re-ranking saliency each time.
    Imp,
    /// One-shot partition at a single scheduled epoch.
    Mp,
    /// One-shot uniformly random mask at a single scheduled epoch.
    Random,
    /// One-shot partition that zeroes static positions instead of keeping a
    /// static copy.
    Prune,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::FullyDynamic => "fully_dynamic",
            Method::Imp => "imp",
            Method::Mp => "mp",
            Method::Random => "random",
            Method::Prune => "prune",
        }
    }
}

impl FromStr for Method {
    type Err = PadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fully_dynamic" => Ok(Method::FullyDynamic),
            "imp" => Ok(Method::Imp),
            "mp" => Ok(Method::Mp),
            "random" => Ok(Method::Random),
            "prune" => Ok(Method::Prune),
            other => Err(PadError::InvalidArgument(format!(
                "unknown method '{other}', expected one of fully_dynamic, imp, mp, random, prune"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Oriented sinusoidal gratings generated on the fly, written to disk as
    /// IDX files and loaded back through the IDX parser.
    Gratings { classes: usize, n_train: usize, n_test: usize, side: usize },
    /// Gaussian clusters on the unit sphere, one mean per class.
    Clusters { classes: usize, dim: usize, n_train: usize, n_test: usize, noise_std: f64 },
    /// Pre-existing IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
    /// CIFAR-10 binary batch files, optionally subsetted deterministically.
    CifarBinary {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Standardize channels using training-set statistics.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    /// Shared-kernel convolution. Input channels are inferred.
    Conv { out_ch: usize, ksize: usize, stride: usize, pad: usize },
    /// Dynamic convolution with `kernels` parallel kernels.
    DyConv { out_ch: usize, ksize: usize, stride: usize, pad: usize, kernels: usize },
    Relu,
    /// Collapse `[b, c, h, w]` to `[b, c]` by spatial averaging.
    GlobalPool,
    /// Fully connected projection. Input width is inferred.
    Linear { out_dim: usize },
    /// Static two-layer feed-forward block, width-preserving.
    Ffn { hidden: usize },
    /// Mixture of experts, width-preserving; each sample is routed to its
    /// `top_n` of `experts` two-layer blocks.
    Moe { experts: usize, top_n: usize, hidden: usize },
}

impl LayerConfig {
    /// Layers whose parameters are per-sample functions of the input, and
    /// therefore subject to partition.
    pub fn is_dynamic(&self) -> bool {
        matches!(self, LayerConfig::DyConv { .. } | LayerConfig::Moe { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureConfig {
    pub start: f64,
    pub end: f64,
    pub anneal_epochs: usize,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig { start: 30.0, end: 1.0, anneal_epochs: 10 }
    }
}

fn default_divergence() -> f64 {
    1e4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Optimizer steps of linear learning-rate warmup before the cosine
    /// decay begins.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Attention softmax temperature schedule for dynamic convolutions.
    #[serde(default)]
    pub temperature: TemperatureConfig,
    /// Abort with an error when the training loss exceeds this.
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
}

fn default_lambda() -> LambdaMode {
    LambdaMode::SumTwo
}

fn default_batches_per_step() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PadConfig {
    pub method: Method,
    /// Target share of positions kept dynamic.
    pub kappa: f64,
    #[serde(default)]
    pub scope: BudgetScope,
    #[serde(default = "default_lambda")]
    pub lambda: LambdaMode,
    /// Epochs at whose start a partition step runs. The schedule length is
    /// this list's length.
    #[serde(default)]
    pub partition_epochs: Vec<usize>,
    /// Fresh batches whose mask gradients are accumulated per step.
    #[serde(default = "default_batches_per_step")]
    pub batches_per_step: usize,
    /// Shrink dynamic stacks and static copies to mask-selected storage once
    /// training finishes.
    #[serde(default = "default_true")]
    pub compact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pad: PadConfig,
}

/// Command-line knobs that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub kappa: Option<f64>,
    pub method: Option<Method>,
}

/// A grid of dynamic-ratio × seed cells over one base experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub kappas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappas.is_empty() {
            return Err(bad("kappas", "need at least one dynamic ratio"));
        }
        for (i, k) in self.kappas.iter().enumerate() {
            if !(0.0..=1.0).contains(k) || k.is_nan() {
                return Err(bad(&format!("kappas[{i}]"), &format!("dynamic ratio must lie in [0, 1], got {k}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "need at least one seed"));
        }
        Ok(())
    }
}

/// The same model and data trained under several partition methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub base: ExperimentConfig,
    /// Any of `fully_dynamic`, `imp`, `mp`, `random`, `prune`, or `static`
    /// (mode partition with every position static).
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
}

impl CompareConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: CompareConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(bad("methods", "need at least one method"));
        }
        for (i, name) in self.methods.iter().enumerate() {
            resolve_method(name).map_err(|e| bad(&format!("methods[{i}]"), &e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "need at least one seed"));
        }
        Ok(())
    }
}

/// Map a comparison method name onto a training method plus any forced
/// dynamic ratio (`static` trains mode partition at κ = 0).
pub fn resolve_method(name: &str) -> Result<(Method, Option<f64>)> {
    if name == "static" {
        return Ok((Method::Mp, Some(0.0)));
    }
    Ok((name.parse()?, None))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(kappa) = o.kappa {
            self.pad.kappa = kappa;
        }
        if let Some(method) = o.method {
            self.pad.method = method;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_data()?;
        self.validate_model()?;
        self.validate_train()?;
        self.validate_pad()
    }

    fn validate_data(&self) -> Result<()> {
        match &self.data.source {
            DataSource::Gratings { classes, n_train, n_test, side } => {
                if *classes < 2 {
                    return Err(bad("data.source.classes", "need at least 2 classes"));
                }
                if *n_train == 0 {
                    return Err(bad("data.source.n_train", "training set cannot be empty"));
                }
                if *n_test == 0 {
                    return Err(bad("data.source.n_test", "test set cannot be empty"));
                }
                if *side < 4 {
                    return Err(bad("data.source.side", "gratings need at least 4 pixels per side"));
                }
            }
            DataSource::Clusters { classes, dim, n_train, n_test, noise_std } => {
                if *classes < 2 {
                    return Err(bad("data.source.classes", "need at least 2 classes"));
                }
                if *dim == 0 {
                    return Err(bad("data.source.dim", "feature dimension cannot be zero"));
                }
                if *n_train == 0 {
                    return Err(bad("data.source.n_train", "training set cannot be empty"));
                }
                if *n_test == 0 {
                    return Err(bad("data.source.n_test", "test set cannot be empty"));
                }
                if !noise_std.is_finite() || *noise_std < 0.0 {
                    return Err(bad("data.source.noise_std", format!("must be finite and non-negative, got {noise_std}")));
                }
            }
            DataSource::Idx { classes, .. } => {
                if *classes < 2 {
                    return Err(bad("data.source.classes", "need at least 2 classes"));
                }
            }
            DataSource::CifarBinary { train_files, test_files, train_subset, test_subset } => {
                if train_files.is_empty() {
                    return Err(bad("data.source.train_files", "need at least one training batch file"));
                }
                if test_files.is_empty() {
                    return Err(bad("data.source.test_files", "need at least one test batch file"));
                }
                if train_subset == &Some(0) {
                    return Err(bad("data.source.train_subset", "subset cannot be zero"));
                }
                if test_subset == &Some(0) {
                    return Err(bad("data.source.test_subset", "subset cannot be zero"));
                }
            }
        }
        Ok(())
    }

    fn validate_model(&self) -> Result<()> {
        if self.model.layers.is_empty() {
            return Err(bad("model.layers", "model needs at least one layer"));
        }
        for (i, layer) in self.model.layers.iter().enumerate() {
            let field = |leaf: &str| format!("model.layers[{i}].{leaf}");
            match layer {
                LayerConfig::Conv { out_ch, ksize, stride, .. } => {
                    if *out_ch == 0 {
                        return Err(bad(&field("out_ch"), "output channels cannot be zero"));
                    }
                    if *ksize == 0 {
                        return Err(bad(&field("ksize"), "kernel size cannot be zero"));
                    }
                    if *stride == 0 {
                        return Err(bad(&field("stride"), "stride cannot be zero"));
                    }
                }
                LayerConfig::DyConv { out_ch, ksize, stride, kernels, .. } => {
                    if *out_ch == 0 {
                        return Err(bad(&field("out_ch"), "output channels cannot be zero"));
                    }
                    if *ksize == 0 {
                        return Err(bad(&field("ksize"), "kernel size cannot be zero"));
                    }
                    if *stride == 0 {
                        return Err(bad(&field("stride"), "stride cannot be zero"));
                    }
                    if *kernels == 0 {
                        return Err(bad(&field("kernels"), "need at least one kernel"));
                    }
                }
                LayerConfig::Linear { out_dim } => {
                    if *out_dim == 0 {
                        return Err(bad(&field("out_dim"), "output width cannot be zero"));
                    }
                }
                LayerConfig::Ffn { hidden } => {
                    if *hidden == 0 {
                        return Err(bad(&field("hidden"), "hidden width cannot be zero"));
                    }
                }
                LayerConfig::Moe { experts, top_n, hidden } => {
                    if *experts == 0 {
                        return Err(bad(&field("experts"), "need at least one expert"));
                    }
                    if *top_n == 0 || top_n > experts {
                        return Err(bad(&field("top_n"), format!("must lie in 1..={experts}, got {top_n}")));
                    }
                    if *hidden == 0 {
                        return Err(bad(&field("hidden"), "hidden width cannot be zero"));
                    }
                }
                LayerConfig::Relu | LayerConfig::GlobalPool => {}
            }
        }
        Ok(())
    }

    fn validate_train(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 {
            return Err(bad("train.epochs", "need at least one epoch"));
        }
        if t.batch_size == 0 {
            return Err(bad("train.batch_size", "batch size cannot be zero"));
        }
        if !t.lr.is_finite() || t.lr <= 0.0 {
            return Err(bad("train.lr", format!("must be positive and finite, got {}", t.lr)));
        }
        if !t.momentum.is_finite() || !(0.0..1.0).contains(&t.momentum) {
            return Err(bad("train.momentum", format!("must lie in [0, 1), got {}", t.momentum)));
        }
        if !t.weight_decay.is_finite() || t.weight_decay < 0.0 {
            return Err(bad("train.weight_decay", format!("must be finite and non-negative, got {}", t.weight_decay)));
        }
        if !t.temperature.start.is_finite() || t.temperature.start <= 0.0 {
            return Err(bad("train.temperature.start", format!("must be positive and finite, got {}", t.temperature.start)));
        }
        if !t.temperature.end.is_finite() || t.temperature.end <= 0.0 {
            return Err(bad("train.temperature.end", format!("must be positive and finite, got {}", t.temperature.end)));
        }
        if !t.divergence_threshold.is_finite() || t.divergence_threshold <= 0.0 {
            return Err(bad(
                "train.divergence_threshold",
                format!("must be positive and finite, got {}", t.divergence_threshold),
            ));
        }
        Ok(())
    }

    fn validate_pad(&self) -> Result<()> {
        let p = &self.pad;
        if p.kappa.is_nan() || !(0.0..=1.0).contains(&p.kappa) {
            return Err(bad("pad.kappa", format!("must lie in [0, 1], got {}", p.kappa)));
        }
        if p.batches_per_step == 0 {
            return Err(bad("pad.batches_per_step", "need at least one batch per partition step"));
        }
        let dynamic_layers = self.model.layers.iter().filter(|l| l.is_dynamic()).count();
        match p.method {
            Method::FullyDynamic => {
                if !p.partition_epochs.is_empty() {
                    return Err(bad("pad.partition_epochs", "fully dynamic training takes no partition schedule"));
                }
                return Ok(());
            }
            Method::Imp => {
                if p.partition_epochs.is_empty() {
                    return Err(bad("pad.partition_epochs", "iterative partition needs at least one scheduled epoch"));
                }
            }
            Method::Mp | Method::Random | Method::Prune => {
                if p.partition_epochs.len() != 1 {
                    return Err(bad(
                        "pad.partition_epochs",
                        format!("{} is one-shot and needs exactly one scheduled epoch", p.method.as_str()),
                    ));
                }
            }
        }
        if dynamic_layers == 0 {
            return Err(bad("model.layers", "partition methods need at least one dynamic layer"));
        }
        for w in self.pad.partition_epochs.windows(2) {
            if w[1] <= w[0] {
                return Err(bad("pad.partition_epochs", "epochs must be strictly increasing"));
            }
        }
        if let Some(&last) = p.partition_epochs.last() {
            if last >= self.train.epochs {
                return Err(bad(
                    "pad.partition_epochs",
                    format!("epoch {last} is out of range for {} training epochs", self.train.epochs),
                ));
            }
        }
        Ok(())
    }
}
