//! Shared on-disk format for named tensor collections.
//!
//! Every artifact that carries parameters (model checkpoints, token slots,
//! sample dumps, dataset vectors) uses the same two-file layout:
//!
//! * `<stem>.json` — a manifest listing each tensor's name, shape, byte
//!   offset, and element count, plus a schema version;
//! * `<stem>.bin` — one little-endian float64 blob holding all tensors
//!   back to back in manifest order.
//!
//! Round trips are bit-exact: the bytes written for a tensor are the bytes
//! read back, including signed zeros and subnormals.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of f64 elements.
    pub count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    tensors: Vec<TensorEntry>,
}

/// Serializes tensors (in name order) into manifest entries plus one blob.
pub fn encode_blob(tensors: &BTreeMap<String, Tensor>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            count: t.len() as u64,
        });
        for &x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    (entries, blob)
}

/// Reconstructs tensors from manifest entries and the blob, validating every
/// offset and the overall blob length.
pub fn decode_blob(entries: &[TensorEntry], blob: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    let mut expected_len = 0u64;
    for e in entries {
        let shape_count: usize = e.shape.iter().product();
        if shape_count as u64 != e.count {
            return Err(Error::Format(format!(
                "tensor `{}`: shape {:?} disagrees with count {}",
                e.name, e.shape, e.count
            )));
        }
        let start = e.offset as usize;
        let bytes = e.count as usize * 8;
        let end = start.checked_add(bytes).ok_or_else(|| {
            Error::Format(format!("tensor `{}`: offset overflow", e.name))
        })?;
        if end > blob.len() {
            return Err(Error::Format(format!(
                "tensor `{}` extends to byte {} but the blob is truncated at {}",
                e.name,
                end,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(e.count as usize);
        for chunk in blob[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("chunk of 8")));
        }
        if out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor name `{}`", e.name)));
        }
        expected_len = expected_len.max(end as u64);
    }
    if expected_len != blob.len() as u64 {
        return Err(Error::Format(format!(
            "blob has {} trailing bytes beyond the last manifest entry",
            blob.len() as u64 - expected_len
        )));
    }
    Ok(out)
}

/// The `(json, bin)` path pair for a checkpoint stem.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut json = stem.as_os_str().to_owned();
    json.push(".json");
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_tensors(stem: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let (entries, blob) = encode_blob(tensors);
    let manifest = Manifest { schema_version: SCHEMA_VERSION, tensors: entries };
    let (json_path, bin_path) = checkpoint_paths(stem);
    if let Some(dir) = json_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&json_path, text)?;
    std::fs::write(&bin_path, blob)?;
    Ok(())
}

/// Reads back a checkpoint written by [`save_tensors`].
pub fn load_tensors(stem: &Path) -> Result<BTreeMap<String, Tensor>> {
    let (json_path, bin_path) = checkpoint_paths(stem);
    let text = std::fs::read_to_string(&json_path)
        .map_err(|_| Error::MissingArtifact(json_path.display().to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let blob = std::fs::read(&bin_path)
        .map_err(|_| Error::MissingArtifact(bin_path.display().to_string()))?;
    decode_blob(&manifest.tensors, &blob)
}
