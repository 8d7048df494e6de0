//! Checkpoint container: a JSON metadata header plus named, dtype-tagged
//! tensor blobs in one file, with helpers for rolling retention.
//!
//! Layout (all integers little-endian):
//! `"RSSLCKPT"` magic, `u32` format version, `u32` metadata length and
//! JSON bytes, `u32` tensor count, then per tensor: `u16` name length,
//! name, `u8` dtype tag, `u8` rank, `u32` dims, raw element bytes.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSSLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Tensors in on-disk order as `(name, value)` pairs.
pub type NamedTensors<S> = Vec<(String, ArrayD<S>)>;

/// Everything needed to resume besides the tensors themselves. All
/// random streams are derived from (seed, epoch, step) counters, so the
/// counters are the complete generator state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ExperimentConfig,
    /// Number of fully completed pretraining epochs.
    pub completed_epochs: u64,
    /// Optimization steps taken so far.
    pub global_step: u64,
    pub queue_cursor: u64,
    pub queue_filled: u64,
    pub best_knn_top1: Option<f64>,
    pub best_knn_epoch: Option<u64>,
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &[(String, ArrayD<S>)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| fmt_err(path, format!("metadata: {e}")))?;
    let meta_len = u32::try_from(meta_json.len())
        .map_err(|_| fmt_err(path, "metadata too large"))?;
    w.write_all(&meta_len.to_le_bytes()).map_err(io)?;
    w.write_all(&meta_json).map_err(io)?;
    let count = u32::try_from(tensors.len()).map_err(|_| fmt_err(path, "too many tensors"))?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for (name, tensor) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| fmt_err(path, format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[S::DTYPE.tag()]).map_err(io)?;
        let rank = u8::try_from(tensor.ndim())
            .map_err(|_| fmt_err(path, format!("tensor rank too high: {name}")))?;
        w.write_all(&[rank]).map_err(io)?;
        for &d in tensor.shape() {
            let d = u32::try_from(d).map_err(|_| fmt_err(path, "dimension too large"))?;
            w.write_all(&d.to_le_bytes()).map_err(io)?;
        }
        let mut payload = Vec::with_capacity(tensor.len() * S::DTYPE.byte_width());
        for &v in tensor.as_standard_layout().iter() {
            v.write_le(&mut payload);
        }
        w.write_all(&payload).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint whose tensors were stored with the same scalar
/// type; a precision mismatch is an error rather than a silent cast.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(CheckpointMeta, NamedTensors<S>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt_err(path, "not a checkpoint file (bad magic)"));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf).map_err(io)?;
    let version = u32::from_le_bytes(u32_buf);
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(
            path,
            format!("checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    r.read_exact(&mut u32_buf).map_err(io)?;
    let meta_len = u32::from_le_bytes(u32_buf) as usize;
    let mut meta_json = vec![0u8; meta_len];
    r.read_exact(&mut meta_json).map_err(io)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| fmt_err(path, format!("metadata: {e}")))?;

    r.read_exact(&mut u32_buf).map_err(io)?;
    let count = u32::from_le_bytes(u32_buf) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16_buf = [0u8; 2];
        r.read_exact(&mut u16_buf).map_err(io)?;
        let name_len = u16::from_le_bytes(u16_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| fmt_err(path, "tensor name is not UTF-8"))?;
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte).map_err(io)?;
        let dtype = Dtype::from_tag(byte[0])
            .ok_or_else(|| fmt_err(path, format!("unknown dtype tag {}", byte[0])))?;
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} stored as {dtype:?} but the run requests {:?}",
                S::DTYPE
            )));
        }
        r.read_exact(&mut byte).map_err(io)?;
        let rank = byte[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut elems = 1usize;
        for _ in 0..rank {
            r.read_exact(&mut u32_buf).map_err(io)?;
            let d = u32::from_le_bytes(u32_buf) as usize;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| fmt_err(path, format!("tensor {name} too large")))?;
            dims.push(d);
        }
        let width = S::DTYPE.byte_width();
        let mut payload = vec![0u8; elems * width];
        r.read_exact(&mut payload).map_err(io)?;
        let data: Vec<S> = payload.chunks_exact(width).map(S::read_le).collect();
        let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| fmt_err(path, format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing).map_err(io)? {
        0 => Ok((meta, tensors)),
        _ => Err(fmt_err(path, "trailing bytes after last tensor")),
    }
}

/// Reads only the metadata header (cheap: no tensor payloads decoded).
pub fn load_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt_err(path, "not a checkpoint file (bad magic)"));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf).map_err(io)?;
    if u32::from_le_bytes(u32_buf) != CHECKPOINT_VERSION {
        return Err(fmt_err(path, "unsupported checkpoint version"));
    }
    r.read_exact(&mut u32_buf).map_err(io)?;
    let meta_len = u32::from_le_bytes(u32_buf) as usize;
    let mut meta_json = vec![0u8; meta_len];
    r.read_exact(&mut meta_json).map_err(io)?;
    serde_json::from_slice(&meta_json).map_err(|e| fmt_err(path, format!("metadata: {e}")))
}

/// File name for the checkpoint written at the end of `epoch`.
#[must_use]
pub fn epoch_checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("checkpoint-{epoch:06}.ckpt"))
}

/// Checkpoint tracking the best monitor accuracy so far.
#[must_use]
pub fn best_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint-best.ckpt")
}

fn epoch_of(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    let digits = name
        .strip_prefix("checkpoint-")?
        .strip_suffix(".ckpt")?;
    digits.parse().ok()
}

/// Epoch checkpoints in `dir`, sorted by epoch ascending. The best-model
/// checkpoint is not included.
pub fn list_epoch_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if let Some(epoch) = epoch_of(&path) {
            found.push((epoch, path));
        }
    }
    found.sort_unstable_by_key(|(e, _)| *e);
    Ok(found)
}

/// Most recent epoch checkpoint, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    Ok(list_epoch_checkpoints(dir)?.into_iter().next_back())
}

/// Deletes epoch checkpoints beyond the `keep_last` most recent ones.
/// Returns the removed paths.
pub fn prune_checkpoints(dir: &Path, keep_last: usize) -> Result<Vec<PathBuf>> {
    let all = list_epoch_checkpoints(dir)?;
    let cut = all.len().saturating_sub(keep_last);
    let mut removed = Vec::new();
    for (_, path) in &all[..cut] {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
        removed.push(path.clone());
    }
    Ok(removed)
}
