//! Deterministic synthetic tasks.
//!
//! Both generators draw exclusively from labeled streams of the master seed,
//! so a given `(task parameters, seed)` pair always produces byte-identical
//! datasets.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{write_idx_images, write_idx_labels, Dataset};
use crate::error::{PadError, Result};
use crate::rng;
use crate::tensor::{Float, Tensor};

/// Gaussian clusters on the unit sphere: one mean per class, samples are
/// `mean + noise_std · N(0, I)`, classes assigned round-robin. Returns
/// `(train, test)`.
pub fn moe_cluster_task(
    classes: usize,
    dim: usize,
    n_train: usize,
    n_test: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes == 0 || dim == 0 {
        return Err(PadError::InvalidArgument("cluster task needs classes ≥ 1 and dim ≥ 1".into()));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(PadError::InvalidArgument(format!("noise_std must be finite and non-negative, got {noise_std}")));
    }
    let mut mean_rng = rng::stream(seed, "cluster-means");
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut mean_rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        means.push(v);
    }

    let draw = |label: &str, n: usize| -> Result<Dataset> {
        let mut r = rng::stream(seed, label);
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            labels.push(class);
            for d in 0..dim {
                let z: f64 = StandardNormal.sample(&mut r);
                data.push((means[class][d] + noise_std * z) as Float);
            }
        }
        Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
    };

    Ok((draw("cluster-train", n_train)?, draw("cluster-test", n_test)?))
}

/// Oriented sinusoidal gratings, one orientation per class, with random
/// phase and amplitude per sample plus pixel noise. Produces `side × side`
/// grayscale bytes in the same layout an IDX file stores.
pub fn grating_image_task(
    classes: usize,
    n: usize,
    side: usize,
    seed: u64,
    split: &str,
) -> Result<(Vec<u8>, Vec<u8>)> {
    if classes == 0 || side == 0 {
        return Err(PadError::InvalidArgument("grating task needs classes ≥ 1 and side ≥ 1".into()));
    }
    if classes > 256 {
        return Err(PadError::InvalidArgument("grating labels must fit one byte".into()));
    }
    let mut r = rng::stream(seed, &format!("grating-{split}"));
    let cycles = 3.0;
    let noise_std = 0.10;
    let half = (side as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u8);
        let theta = PI * class as f64 / classes as f64;
        let (sin_t, cos_t) = theta.sin_cos();
        let phase: f64 = r.gen_range(0.0..(2.0 * PI));
        let amplitude: f64 = r.gen_range(0.75..1.0);
        for y in 0..side {
            for x in 0..side {
                let u = (x as f64 - half) / side as f64;
                let v = (y as f64 - half) / side as f64;
                let wave = (2.0 * PI * cycles * (u * cos_t + v * sin_t) + phase).sin();
                let z: f64 = StandardNormal.sample(&mut r);
                let value = 0.5 + 0.5 * amplitude * wave + noise_std * z;
                pixels.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok((pixels, labels))
}

/// File locations produced by [`write_grating_idx`].
#[derive(Debug, Clone)]
pub struct GratingPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Generate a grating dataset and write it as standard IDX image/label
/// files under `dir`, so downstream code exercises the real IDX loader.
/// Regeneration with the same arguments rewrites identical bytes.
pub fn write_grating_idx(
    dir: &Path,
    classes: usize,
    n_train: usize,
    n_test: usize,
    side: usize,
    seed: u64,
) -> Result<GratingPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = GratingPaths {
        train_images: dir.join("train-images.idx"),
        train_labels: dir.join("train-labels.idx"),
        test_images: dir.join("test-images.idx"),
        test_labels: dir.join("test-labels.idx"),
    };
    let (train_px, train_lb) = grating_image_task(classes, n_train, side, seed, "train")?;
    let (test_px, test_lb) = grating_image_task(classes, n_test, side, seed, "test")?;
    write_idx_images(&paths.train_images, &train_px, n_train, side, side)?;
    write_idx_labels(&paths.train_labels, &train_lb)?;
    write_idx_images(&paths.test_images, &test_px, n_test, side, side)?;
    write_idx_labels(&paths.test_labels, &test_lb)?;
    Ok(paths)
}
