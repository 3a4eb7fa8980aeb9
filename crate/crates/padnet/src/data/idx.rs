//! IDX container (the MNIST wire format): big-endian magic and dimensions,
//! then raw unsigned bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Dataset;
use crate::error::{PadError, Result};
use crate::tensor::{Float, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(PadError::Format {
            offset: bytes.len() as u64,
            message: format!("file truncated while reading {what}"),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Images as `[n, 1, h, w]` scaled to `[0, 1]` (divide by 255; no
/// normalization yet — fit that on the training split and apply to both).
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(PadError::Format {
            offset: 0,
            message: format!("bad images magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(&bytes, 4, "image count")? as usize;
    let h = read_u32_be(&bytes, 8, "image height")? as usize;
    let w = read_u32_be(&bytes, 12, "image width")? as usize;
    let need = 16 + n * h * w;
    if bytes.len() != need {
        return Err(PadError::Format {
            offset: bytes.len().min(need) as u64,
            message: format!("images payload holds {} bytes, header implies {}", bytes.len() - 16, n * h * w),
        });
    }
    let data: Vec<Float> = bytes[16..].iter().map(|&b| b as Float / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(PadError::Format {
            offset: 0,
            message: format!("bad labels magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(&bytes, 4, "label count")? as usize;
    if bytes.len() != 8 + n {
        return Err(PadError::Format {
            offset: bytes.len().min(8 + n) as u64,
            message: format!("labels payload holds {} bytes, header implies {n}", bytes.len() - 8),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Load an image/label pair into a dataset.
pub fn load_idx_pair(images: &Path, labels: &Path, class_count: usize) -> Result<Dataset> {
    let inputs = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != inputs.shape()[0] {
        return Err(PadError::Format {
            offset: 4,
            message: format!("label count {} does not match image count {}", labels.len(), inputs.shape()[0]),
        });
    }
    Dataset::new(inputs, labels, class_count)
}

pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, h: usize, w: usize) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(PadError::ShapeMismatch {
            op: "write_idx_images",
            detail: format!("{} bytes for {n}×{h}×{w}", pixels.len()),
        });
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(h as u32).to_be_bytes())?;
    f.write_all(&(w as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 17 % 256) as u8).collect();
        write_idx_images(&img_path, &pixels, 2, 3, 3).unwrap();
        write_idx_labels(&lbl_path, &[1, 4]).unwrap();

        let ds = load_idx_pair(&img_path, &lbl_path, 5).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 1, 3, 3]);
        assert_eq!(ds.labels, vec![1, 4]);
        // Scaling by 255 is exact per byte value.
        for (i, &b) in pixels.iter().enumerate() {
            assert_eq!(ds.inputs.data()[i], b as Float / 255.0);
            let recovered = (ds.inputs.data()[i] * 255.0).round() as u8;
            assert_eq!(recovered, b);
        }
    }

    #[test]
    fn bad_magic_is_reported_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.idx");
        std::fs::write(&p, [0u8, 0, 8, 9, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1]).unwrap();
        match load_idx_images(&p).unwrap_err() {
            PadError::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("wrong error: {e}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[7u8; 10]); // needs 18
        std::fs::write(&p, &bytes).unwrap();
        match load_idx_images(&p).unwrap_err() {
            PadError::Format { offset, .. } => assert_eq!(offset, 26),
            e => panic!("wrong error: {e}"),
        }
    }

    #[test]
    fn truncated_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stub.idx");
        std::fs::write(&p, [0u8, 0]).unwrap();
        match load_idx_images(&p).unwrap_err() {
            PadError::Format { offset, .. } => assert_eq!(offset, 2),
            e => panic!("wrong error: {e}"),
        }
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        write_idx_images(&img_path, &[0u8; 9], 1, 3, 3).unwrap();
        write_idx_labels(&lbl_path, &[0, 1]).unwrap();
        assert!(load_idx_pair(&img_path, &lbl_path, 2).is_err());
    }
}
