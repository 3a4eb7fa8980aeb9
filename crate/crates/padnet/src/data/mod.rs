//! Datasets and batching.

mod cifar;
mod idx;
mod synthetic;

pub use cifar::load_cifar_binary;
pub use idx::{load_idx_images, load_idx_labels, load_idx_pair, write_idx_images, write_idx_labels};
pub use synthetic::{grating_image_task, moe_cluster_task, write_grating_idx, GratingPaths};

use rand::seq::SliceRandom;

use crate::error::{PadError, Result};
use crate::rng;
use crate::tensor::{Float, Tensor};

/// In-memory dataset: inputs `[n, ...]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = *inputs.shape().first().ok_or_else(|| PadError::InvalidArgument("dataset inputs need a leading sample axis".into()))?;
        if labels.len() != n {
            return Err(PadError::ShapeMismatch {
                op: "Dataset::new",
                detail: format!("{} labels for {n} samples", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(PadError::InvalidArgument(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Dataset { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample (without the leading axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_numel(&self) -> usize {
        crate::tensor::numel(self.sample_shape())
    }

    /// Materialize the given samples as a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let stride = self.sample_numel();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(PadError::InvalidArgument(format!("sample index {i} out of range {}", self.len())));
            }
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }
}

/// Per-channel affine normalization statistics for image datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<Float>,
    pub std: Vec<Float>,
}

/// Fit per-channel mean and (population) standard deviation of a
/// `[n, c, h, w]` dataset.
pub fn fit_norm(ds: &Dataset) -> Result<NormStats> {
    let (n, c, h, w) = match ds.inputs.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(PadError::ShapeMismatch {
                op: "fit_norm",
                detail: format!("expected [n, c, h, w] inputs, got {s:?}"),
            })
        }
    };
    let area = h * w;
    let count = (n * area) as Float;
    let src = ds.inputs.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * area;
            for p in 0..area {
                mean[ch] += src[base + p];
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * area;
            for p in 0..area {
                let d = src[base + p] - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / count).sqrt();
            if s == 0.0 {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// Apply `(x − mean) / std` per channel, in place.
pub fn apply_norm(ds: &mut Dataset, stats: &NormStats) -> Result<()> {
    let (n, c, h, w) = match ds.inputs.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(PadError::ShapeMismatch {
                op: "apply_norm",
                detail: format!("expected [n, c, h, w] inputs, got {s:?}"),
            })
        }
    };
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(PadError::ShapeMismatch {
            op: "apply_norm",
            detail: format!("{} channel stats for {c} channels", stats.mean.len()),
        });
    }
    let area = h * w;
    let data = ds.inputs.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * area;
            for p in 0..area {
                data[base + p] = (data[base + p] - stats.mean[ch]) / stats.std[ch];
            }
        }
    }
    Ok(())
}

/// Epoch-level batch stream. With `shuffle`, the visit order is a seeded
/// permutation that depends on `(seed, epoch)` only; without, it is the
/// dataset order. Every index is visited exactly once per epoch; the final
/// batch may be short.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(PadError::InvalidArgument("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        if shuffle {
            let mut r = rng::substream(seed, "batch-shuffle", epoch);
            order.shuffle(&mut r);
        }
        Ok(BatchIterator { dataset, order, pos: 0, batch_size })
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.order.len() + self.batch_size - 1) / self.batch_size
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next_batch(&mut self) -> Option<Result<(Tensor, Vec<usize>)>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.dataset.gather(idx))
    }
}
