//! Single-file checkpoint container.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then a raw
//! little-endian payload. The header records the container version, the
//! float width the payload was written with, a free-form `state` value, and
//! one record per payload block (name, kind, logical shape, byte offset
//! into the payload, byte length). Dense blocks hold floats; mask blocks
//! hold bit-packed dynamic/static indicators. Entries are written in name
//! order, so the same contents always produce the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PadError, Result};
use crate::pad::IndicatorMask;
use crate::tensor::{numel, Float, Tensor};

pub const CONTAINER_VERSION: u32 = 1;

const FLOAT_BYTES: usize = std::mem::size_of::<Float>();

fn dtype_name() -> &'static str {
    if FLOAT_BYTES == 8 {
        "f64"
    } else {
        "f32"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Dense,
    Mask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    state: serde_json::Value,
    entries: Vec<Entry>,
}

/// In-memory checkpoint: a free-form JSON `state` plus named dense tensors
/// and named indicator masks.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub state: serde_json::Value,
    dense: BTreeMap<String, Tensor>,
    masks: BTreeMap<String, IndicatorMask>,
}

impl Container {
    pub fn new(state: serde_json::Value) -> Self {
        Container { state, dense: BTreeMap::new(), masks: BTreeMap::new() }
    }

    fn check_fresh(&self, name: &str) -> Result<()> {
        if self.dense.contains_key(name) || self.masks.contains_key(name) {
            return Err(PadError::InvalidArgument(format!("container already holds an entry named '{name}'")));
        }
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.check_fresh(name)?;
        self.dense.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn insert_mask(&mut self, name: &str, mask: IndicatorMask) -> Result<()> {
        self.check_fresh(name)?;
        self.masks.insert(name.to_string(), mask);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.dense
            .get(name)
            .ok_or_else(|| PadError::InvalidArgument(format!("container has no tensor named '{name}'")))
    }

    pub fn mask(&self, name: &str) -> Result<&IndicatorMask> {
        self.masks
            .get(name)
            .ok_or_else(|| PadError::InvalidArgument(format!("container has no mask named '{name}'")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.dense.keys().map(|s| s.as_str())
    }

    pub fn mask_names(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(|s| s.as_str())
    }

    /// Total float scalars stored in dense entries.
    pub fn dense_scalar_count(&self) -> usize {
        self.dense.values().map(|t| t.data().len()).sum()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut payload: Vec<u8> = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.dense {
            let offset = payload.len() as u64;
            for &x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            entries.push(Entry {
                name: name.clone(),
                kind: EntryKind::Dense,
                shape: t.shape().to_vec(),
                offset,
                byte_len: (t.data().len() * FLOAT_BYTES) as u64,
            });
        }
        for (name, m) in &self.masks {
            let offset = payload.len() as u64;
            let packed = m.pack();
            let byte_len = packed.len() as u64;
            payload.extend_from_slice(&packed);
            entries.push(Entry {
                name: name.clone(),
                kind: EntryKind::Mask,
                shape: vec![m.len()],
                offset,
                byte_len,
            });
        }
        let header = Header {
            version: CONTAINER_VERSION,
            dtype: dtype_name().to_string(),
            state: self.state.clone(),
            entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = fs::File::create(path)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 {
            return Err(PadError::Format {
                offset: 0,
                message: format!("file holds {} bytes, too short for the 8-byte header length", bytes.len()),
            });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(8))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| PadError::Format {
                offset: 0,
                message: format!("header length {header_len} exceeds file size {}", bytes.len()),
            })?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end]).map_err(|e| PadError::Format {
            offset: 8,
            message: format!("header is not valid JSON: {e}"),
        })?;
        if header.version != CONTAINER_VERSION {
            return Err(PadError::Format {
                offset: 8,
                message: format!("container version {} not supported, expected {CONTAINER_VERSION}", header.version),
            });
        }
        if header.dtype != dtype_name() {
            return Err(PadError::Format {
                offset: 8,
                message: format!("payload dtype {} does not match this build's {}", header.dtype, dtype_name()),
            });
        }
        let payload = &bytes[header_end..];
        let mut out = Container::new(header.state);
        for e in &header.entries {
            let abs = header_end as u64 + e.offset;
            let block = usize::try_from(e.offset)
                .ok()
                .zip(usize::try_from(e.byte_len).ok())
                .and_then(|(start, len)| start.checked_add(len).map(|end| (start, end)))
                .filter(|&(_, end)| end <= payload.len())
                .map(|(start, end)| &payload[start..end])
                .ok_or_else(|| PadError::Format {
                    offset: abs,
                    message: format!("entry '{}' extends past the end of the payload", e.name),
                })?;
            out.check_fresh(&e.name).map_err(|_| PadError::Format {
                offset: abs,
                message: format!("duplicate entry name '{}'", e.name),
            })?;
            match e.kind {
                EntryKind::Dense => {
                    let count = numel(&e.shape);
                    if block.len() != count * FLOAT_BYTES {
                        return Err(PadError::Format {
                            offset: abs,
                            message: format!(
                                "entry '{}' holds {} bytes but shape {:?} needs {}",
                                e.name,
                                block.len(),
                                e.shape,
                                count * FLOAT_BYTES
                            ),
                        });
                    }
                    let data: Vec<Float> =
                        block.chunks_exact(FLOAT_BYTES).map(|c| Float::from_le_bytes(c.try_into().unwrap())).collect();
                    out.dense.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
                }
                EntryKind::Mask => {
                    if e.shape.len() != 1 {
                        return Err(PadError::Format {
                            offset: abs,
                            message: format!("mask entry '{}' must have a rank-1 shape, got {:?}", e.name, e.shape),
                        });
                    }
                    let mask = IndicatorMask::unpack(block, e.shape[0]).map_err(|err| {
                        let detail = match err {
                            PadError::Format { message, .. } => message,
                            other => other.to_string(),
                        };
                        PadError::Format { offset: abs, message: format!("mask entry '{}': {detail}", e.name) }
                    })?;
                    out.masks.insert(e.name.clone(), mask);
                }
            }
        }
        Ok(out)
    }
}

/// Store a dataset in the same container format: inputs as one dense entry,
/// labels as another, class count in the header state.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut c = Container::new(serde_json::json!({ "class_count": ds.class_count }));
    c.insert_tensor("inputs", ds.inputs.clone())?;
    let labels = Tensor::new(vec![ds.labels.len()], ds.labels.iter().map(|&l| l as Float).collect())?;
    c.insert_tensor("labels", labels)?;
    c.write(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let c = Container::read(path)?;
    let class_count = c.state.get("class_count").and_then(|v| v.as_u64()).ok_or_else(|| PadError::Format {
        offset: 8,
        message: "dataset container is missing a class_count".into(),
    })? as usize;
    let inputs = c.tensor("inputs")?.clone();
    let labels = c.tensor("labels")?.data().iter().map(|&x| x as usize).collect();
    Dataset::new(inputs, labels, class_count)
}
