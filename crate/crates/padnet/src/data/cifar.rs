//! CIFAR-10 binary batches: records of one label byte followed by a
//! channel-major 3×32×32 pixel block.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{PadError, Result};
use crate::rng;
use crate::tensor::{Float, Tensor};

const RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

/// Load one or more CIFAR-10 binary files. With `subset = Some(s)`, a
/// seed-deterministic sample of `s` records (without replacement, kept in
/// file order) is returned instead of the full set. Pixels are scaled to
/// `[0, 1]`.
pub fn load_cifar_binary(paths: &[impl AsRef<Path>], subset: Option<usize>, seed: u64) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels: Vec<u8> = Vec::new();
    for path in paths {
        let bytes = fs::read(path.as_ref())?;
        if bytes.len() % RECORD_LEN != 0 {
            return Err(PadError::Format {
                offset: (bytes.len() / RECORD_LEN * RECORD_LEN) as u64,
                message: format!(
                    "file length {} is not a whole number of {RECORD_LEN}-byte records",
                    bytes.len()
                ),
            });
        }
        for (r, record) in bytes.chunks_exact(RECORD_LEN).enumerate() {
            let label = record[0] as usize;
            if label >= CLASSES {
                return Err(PadError::Format {
                    offset: (r * RECORD_LEN) as u64,
                    message: format!("label byte {label} out of range for {CLASSES} classes"),
                });
            }
            labels.push(label);
            pixels.extend_from_slice(&record[1..]);
        }
    }
    let total = labels.len();

    let keep: Vec<usize> = match subset {
        None => (0..total).collect(),
        Some(s) if s > total => {
            return Err(PadError::InvalidArgument(format!("subset {s} exceeds {total} available records")));
        }
        Some(s) => {
            let mut r = rng::stream(seed, "cifar-subset");
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut r, total, s).into_vec();
            idx.sort_unstable();
            idx
        }
    };

    let mut data = Vec::with_capacity(keep.len() * 3072);
    let mut kept_labels = Vec::with_capacity(keep.len());
    for &i in &keep {
        kept_labels.push(labels[i]);
        data.extend(pixels[i * 3072..(i + 1) * 3072].iter().map(|&b| b as Float / 255.0));
    }
    Dataset::new(Tensor::new(vec![keep.len(), 3, 32, 32], data)?, kept_labels, CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fake_cifar(path: &Path, n: usize) {
        let mut bytes = Vec::with_capacity(n * RECORD_LEN);
        for i in 0..n {
            bytes.push((i % CLASSES) as u8);
            for p in 0..3072usize {
                bytes.push(((i * 31 + p * 7) % 256) as u8);
            }
        }
        fs::write(path, &bytes).unwrap();
    }

    #[test]
    fn parses_records_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        write_fake_cifar(&p, 4);
        let ds = load_cifar_binary(&[&p], None, 0).unwrap();
        assert_eq!(ds.inputs.shape(), &[4, 3, 32, 32]);
        assert_eq!(ds.labels, vec![0, 1, 2, 3]);
        // First pixel of record 1: byte (1*31 + 0) % 256 = 31.
        assert_eq!(ds.inputs.data()[3072], 31.0 / 255.0);
        // A byte of 255 must scale to exactly 1.0.
        let any_255 = ds.inputs.data().iter().any(|&v| v == 1.0);
        assert!(any_255);
    }

    #[test]
    fn partial_record_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("torn.bin");
        let mut bytes = vec![0u8; RECORD_LEN];
        bytes.extend_from_slice(&[1u8; 100]);
        fs::write(&p, &bytes).unwrap();
        match load_cifar_binary(&[&p], None, 0).unwrap_err() {
            PadError::Format { offset, .. } => assert_eq!(offset, RECORD_LEN as u64),
            e => panic!("wrong error: {e}"),
        }
    }

    #[test]
    fn subset_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        write_fake_cifar(&p, 20);
        let a = load_cifar_binary(&[&p], Some(5), 1).unwrap();
        let b = load_cifar_binary(&[&p], Some(5), 1).unwrap();
        let c = load_cifar_binary(&[&p], Some(5), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.labels, c.labels);
        assert_eq!(a.len(), 5);
        assert!(load_cifar_binary(&[&p], Some(21), 1).is_err());
    }

    #[test]
    fn multiple_files_concatenate() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("b1.bin");
        let p2 = dir.path().join("b2.bin");
        write_fake_cifar(&p1, 3);
        write_fake_cifar(&p2, 2);
        let ds = load_cifar_binary(&[&p1, &p2], None, 0).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.labels, vec![0, 1, 2, 0, 1]);
    }
}
