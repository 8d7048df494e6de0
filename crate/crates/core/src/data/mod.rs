//! Dataset handling: archive ingest into a packed uniform format,
//! manifests with checksums and normalization statistics, and
//! deterministic batch iteration.

mod batches;
mod ingest;
mod packed;

pub use batches::{epoch_indices, BatchIter};
pub use ingest::{ingest, IngestOptions};
pub use packed::{PackedDataset, PackedWriter, PACKED_MAGIC, PACKED_VERSION};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Cifar10,
    Cifar100,
    Stl10,
    TinyImagenet,
}

impl DatasetName {
    #[must_use]
    pub fn num_classes(self) -> usize {
        match self {
            DatasetName::Cifar10 | DatasetName::Stl10 => 10,
            DatasetName::Cifar100 => 100,
            DatasetName::TinyImagenet => 200,
        }
    }

    /// Side length of stored images.
    #[must_use]
    pub fn native_side(self) -> usize {
        match self {
            DatasetName::Cifar10 | DatasetName::Cifar100 => 32,
            DatasetName::Stl10 => 96,
            DatasetName::TinyImagenet => 64,
        }
    }

    /// Default augmented view side for training and evaluation.
    #[must_use]
    pub fn default_view_side(self) -> usize {
        match self {
            DatasetName::Cifar10 | DatasetName::Cifar100 => 32,
            DatasetName::Stl10 | DatasetName::TinyImagenet => 64,
        }
    }

    /// Datasets at 32 pixels use the small regime defaults; larger ones
    /// the medium regime (queue size, teacher momentum).
    #[must_use]
    pub fn is_small_regime(self) -> bool {
        self.default_view_side() <= 32
    }

    #[must_use]
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar100 => "cifar100",
            DatasetName::Stl10 => "stl10",
            DatasetName::TinyImagenet => "tiny_imagenet",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetName::Cifar10),
            "cifar100" => Ok(DatasetName::Cifar100),
            "stl10" => Ok(DatasetName::Stl10),
            "tiny_imagenet" | "tiny-imagenet" => Ok(DatasetName::TinyImagenet),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Labeled training split.
    Train,
    Test,
    /// Split used for pretraining. Identical to `train` except on the
    /// 96-pixel dataset, where it adds the unlabeled images.
    Pretrain,
}

impl Split {
    #[must_use]
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Pretrain => "pretrain",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "pretrain" => Ok(Split::Pretrain),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Label used for records without annotations.
pub const UNLABELED: i32 = -1;

/// One decoded sample: row-major HWC RGB bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: u32,
    pub label: i32,
    pub pixels: Vec<u8>,
}

/// Per-channel statistics in [0, 1] pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Sidecar metadata written next to each packed split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: DatasetName,
    pub split: Split,
    pub count: u64,
    pub image_height: u32,
    pub image_width: u32,
    pub num_classes: u32,
    /// Count per class index; unlabeled records are excluded.
    pub class_histogram: Vec<u64>,
    pub unlabeled_count: u64,
    /// Hex SHA-256 of the packed split file.
    pub packed_sha256: String,
    /// Channel statistics of this split's pixels.
    pub stats: NormStats,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Where a packed split and its manifest live under a data directory.
#[must_use]
pub fn packed_path(data_dir: &Path, name: DatasetName, split: Split) -> PathBuf {
    data_dir.join(format!("{name}_{split}.bin"))
}

#[must_use]
pub fn manifest_path(data_dir: &Path, name: DatasetName, split: Split) -> PathBuf {
    data_dir.join(format!("{name}_{split}.manifest.json"))
}

/// Loads a packed split, verifying its manifest checksum matches.
pub fn open_split(
    data_dir: &Path,
    name: DatasetName,
    split: Split,
) -> Result<(PackedDataset, DatasetManifest)> {
    // Only the 96-pixel dataset materializes a distinct pretraining
    // file; everywhere else the pretraining pool is the training split.
    let split = if split == Split::Pretrain && name != DatasetName::Stl10 {
        Split::Train
    } else {
        split
    };
    let m_path = manifest_path(data_dir, name, split);
    let p_path = packed_path(data_dir, name, split);
    let manifest = DatasetManifest::load(&m_path)?;
    let dataset = PackedDataset::open(&p_path)?;
    if dataset.count() as u64 != manifest.count {
        return Err(Error::Format {
            path: p_path,
            reason: format!(
                "packed file holds {} records but manifest says {}",
                dataset.count(),
                manifest.count
            ),
        });
    }
    Ok((dataset, manifest))
}

/// Streaming hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    use std::io::Read;
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

#[must_use]
pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
