//! Checkpoint format: `manifest.json` describing name → {shape, dtype, byte
//! offset} plus `params.bin`, one little-endian float blob. The manifest
//! carries a format version integer.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{AdError, ParamSet, Result, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const BLOB_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    blob: String,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: usize,
}

/// Write a checkpoint directory. Blob and manifest are written to temp files
/// and renamed so a crash never leaves a truncated checkpoint behind.
pub fn save_checkpoint(params: &ParamSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::with_capacity(params.entry_count() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let offset = blob.len() as u64;
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(Entry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            len: tensor.len(),
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        blob: BLOB_FILE.to_string(),
        entries,
    };
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamSet> {
    let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))
        .map_err(|e| AdError::Checkpoint(format!("{}: {e}", dir.display())))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(AdError::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {})",
            manifest.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    let mut params = ParamSet::new();
    for entry in &manifest.entries {
        if entry.dtype != "f32" {
            return Err(AdError::Checkpoint(format!(
                "parameter `{}` has unsupported dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len * 4;
        if end > blob.len() {
            return Err(AdError::Checkpoint(format!(
                "parameter `{}` spans {start}..{end} past blob of {} bytes",
                entry.name,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(params)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
