//! Versioned experiment configuration: TOML on disk, dataset-dependent
//! defaults resolved at point of use so a minimal file stays minimal.

use crate::data::DatasetName;
use crate::error::{Error, Result};
use crate::model::{BackboneArch, ProjectionHeadSpec};
use crate::relational::TemperaturePair;
use crate::scalar::Dtype;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[must_use]
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

/// Training objective: relation matching over the queue (default), the
/// InfoNCE contrastive baseline, or the predictor+cosine baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Ressl,
    InfoNce,
    ByolStyle,
}

/// Which pipeline feeds the teacher: the weak crop+flip pipeline
/// (default) or the full contrastive one (ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherAugmentation {
    #[default]
    Weak,
    Contrastive,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_batch_size() -> usize {
    256
}
fn default_epochs() -> usize {
    200
}
fn default_warmup_epochs() -> usize {
    5
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_sgd_momentum() -> f64 {
    0.9
}
fn default_teacher_temperature() -> f64 {
    0.04
}
fn default_student_temperature() -> f64 {
    0.1
}
fn default_bn_groups() -> usize {
    8
}
fn default_head() -> ProjectionHeadSpec {
    ProjectionHeadSpec::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub dataset: DatasetName,
    /// Directory holding the packed splits and manifests.
    pub data_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    /// Peak learning rate; `None` resolves to 0.06 × batch/256.
    #[serde(default)]
    pub base_lr: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_sgd_momentum")]
    pub sgd_momentum: f64,
    #[serde(default = "default_teacher_temperature")]
    pub teacher_temperature: f64,
    #[serde(default = "default_student_temperature")]
    pub student_temperature: f64,
    /// `None` resolves per dataset: 4096 (small) / 16384 (medium).
    #[serde(default)]
    pub queue_capacity: Option<usize>,
    /// `None` resolves per dataset: 0.99 (small) / 0.996 (medium).
    #[serde(default)]
    pub ema_momentum: Option<f64>,
    /// Groups for teacher-side normalization statistics (shuffled-norm
    /// simulation on one device). 1 disables grouping.
    #[serde(default = "default_bn_groups")]
    pub bn_groups: usize,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub teacher_augmentation: TeacherAugmentation,
    /// Train the student on a ladder of smaller crops as well.
    #[serde(default)]
    pub multicrop: bool,
    /// `None` resolves per dataset (small stem at 32px, pooled small stem
    /// at 64px).
    #[serde(default)]
    pub arch: Option<BackboneArch>,
    /// Square view side fed to the networks; `None` resolves per dataset.
    #[serde(default)]
    pub view_side: Option<usize>,
    #[serde(default = "default_head")]
    pub head: ProjectionHeadSpec,
    #[serde(default)]
    pub seed: u64,
    /// Run the nearest-neighbor monitor every N epochs; 0 disables it.
    #[serde(default)]
    pub knn_monitor_every: usize,
}

impl ExperimentConfig {
    /// Baseline configuration for a dataset with every `None` left to
    /// dataset-dependent resolution.
    #[must_use]
    pub fn defaults_for(dataset: DatasetName, data_dir: PathBuf) -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            dataset,
            data_dir,
            precision: Precision::default(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            warmup_epochs: default_warmup_epochs(),
            base_lr: None,
            weight_decay: default_weight_decay(),
            sgd_momentum: default_sgd_momentum(),
            teacher_temperature: default_teacher_temperature(),
            student_temperature: default_student_temperature(),
            queue_capacity: None,
            ema_momentum: None,
            bn_groups: default_bn_groups(),
            objective: Objective::default(),
            teacher_augmentation: TeacherAugmentation::default(),
            multicrop: false,
            arch: None,
            view_side: None,
            head: ProjectionHeadSpec::default(),
            seed: 0,
            knn_monitor_every: 0,
        }
    }

    #[must_use]
    pub fn resolved_queue_capacity(&self) -> usize {
        self.queue_capacity.unwrap_or(if self.dataset.is_small_regime() {
            4096
        } else {
            16384
        })
    }

    #[must_use]
    pub fn resolved_ema_momentum(&self) -> f64 {
        self.ema_momentum.unwrap_or(if self.dataset.is_small_regime() {
            0.99
        } else {
            0.996
        })
    }

    #[must_use]
    pub fn resolved_arch(&self) -> BackboneArch {
        self.arch.unwrap_or(if self.dataset.is_small_regime() {
            BackboneArch::Resnet18Small
        } else {
            BackboneArch::Resnet18Medium
        })
    }

    #[must_use]
    pub fn resolved_view_side(&self) -> usize {
        self.view_side.unwrap_or(self.dataset.default_view_side())
    }

    #[must_use]
    pub fn resolved_base_lr(&self) -> f64 {
        self.base_lr
            .unwrap_or(0.06 * self.batch_size as f64 / 256.0)
    }

    /// Student crop ladder: the canonical side alone, or the three-rung
    /// ladder when multi-crop is on.
    #[must_use]
    pub fn multicrop_sides(&self) -> Vec<usize> {
        let side = self.resolved_view_side();
        if self.multicrop {
            vec![side, side * 3 / 4, side / 2]
        } else {
            vec![side]
        }
    }

    pub fn temperatures<S: crate::scalar::Scalar>(&self) -> Result<TemperaturePair<S>> {
        TemperaturePair::new(
            S::cast(self.teacher_temperature),
            S::cast(self.student_temperature),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return cfg(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.batch_size < 2 {
            return cfg("batch_size must be at least 2 (normalization statistics)".into());
        }
        if self.epochs == 0 {
            return cfg("epochs must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return cfg(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.resolved_queue_capacity() < self.batch_size {
            return cfg(format!(
                "queue capacity {} is below the batch size {}; the queue must hold at least one batch",
                self.resolved_queue_capacity(),
                self.batch_size
            ));
        }
        let m = self.resolved_ema_momentum();
        if !(0.0..=1.0).contains(&m) {
            return cfg(format!("ema momentum must lie in [0, 1], got {m}"));
        }
        if self.bn_groups == 0 || !self.batch_size.is_multiple_of(self.bn_groups) {
            return cfg(format!(
                "bn_groups {} must be positive and divide the batch size {}",
                self.bn_groups, self.batch_size
            ));
        }
        if self.weight_decay < 0.0 || self.sgd_momentum < 0.0 || self.sgd_momentum >= 1.0 {
            return cfg("weight decay must be >= 0 and momentum in [0, 1)".into());
        }
        if let Some(lr) = self.base_lr {
            if !(lr.is_finite() && lr > 0.0) {
                return cfg(format!("base_lr must be positive, got {lr}"));
            }
        }
        self.temperatures::<f64>()?;
        if self.head.hidden_dim == 0 || self.head.output_dim == 0 {
            return cfg("projection head dimensions must be positive".into());
        }
        if self.resolved_view_side() < 8 {
            return cfg("view_side must be at least 8".into());
        }
        if self.multicrop && self.multicrop_sides().iter().any(|&s| s < 8) {
            return cfg("multi-crop ladder produces a side below 8".into());
        }
        Ok(())
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Stable 16-hex-digit digest of the canonical JSON encoding;
    /// identifies a configuration in sweep tables and eval reports.
    #[must_use]
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_dependent_defaults_resolve() {
        let small = ExperimentConfig::defaults_for(DatasetName::Cifar10, "/tmp/d".into());
        assert_eq!(small.resolved_queue_capacity(), 4096);
        assert!((small.resolved_ema_momentum() - 0.99).abs() < 1e-12);
        assert_eq!(small.resolved_arch(), BackboneArch::Resnet18Small);
        assert_eq!(small.resolved_view_side(), 32);
        assert!((small.resolved_base_lr() - 0.06).abs() < 1e-15);
        assert_eq!(small.multicrop_sides(), vec![32]);

        let medium = ExperimentConfig::defaults_for(DatasetName::TinyImagenet, "/tmp/d".into());
        assert_eq!(medium.resolved_queue_capacity(), 16384);
        assert!((medium.resolved_ema_momentum() - 0.996).abs() < 1e-12);
        assert_eq!(medium.resolved_arch(), BackboneArch::Resnet18Medium);
        assert_eq!(medium.resolved_view_side(), 64);
        let mut mc = medium.clone();
        mc.multicrop = true;
        assert_eq!(mc.multicrop_sides(), vec![64, 48, 32]);
    }

    #[test]
    fn minimal_toml_loads_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "dataset = \"cifar10\"\ndata_dir = \"/tmp/data\"\n").unwrap();
        let cfg = ExperimentConfig::load_toml(&path).unwrap();
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.epochs, 200);
        assert!((cfg.teacher_temperature - 0.04).abs() < 1e-15);
        assert!((cfg.student_temperature - 0.1).abs() < 1e-15);
        assert_eq!(cfg.objective, Objective::Ressl);
        assert_eq!(cfg.precision, Precision::F32);
    }

    #[test]
    fn round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        let mut cfg = ExperimentConfig::defaults_for(DatasetName::Stl10, "/tmp/data".into());
        cfg.objective = Objective::InfoNce;
        cfg.multicrop = true;
        cfg.queue_capacity = Some(2048);
        cfg.save_toml(&path).unwrap();
        let loaded = ExperimentConfig::load_toml(&path).unwrap();
        assert_eq!(cfg, loaded);
        assert_eq!(cfg.hash(), loaded.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "dataset = \"cifar10\"\ndata_dir = \"/d\"\nbatchsize = 4\n",
        )
        .unwrap();
        assert!(ExperimentConfig::load_toml(&path).is_err(), "typo must fail");

        let mut cfg = ExperimentConfig::defaults_for(DatasetName::Cifar10, "/d".into());
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::defaults_for(DatasetName::Cifar10, "/d".into());
        cfg.bn_groups = 7;
        assert!(cfg.validate().is_err(), "groups must divide batch");
        let mut cfg = ExperimentConfig::defaults_for(DatasetName::Cifar10, "/d".into());
        cfg.queue_capacity = Some(10);
        assert!(cfg.validate().is_err(), "queue below batch");
        let mut cfg = ExperimentConfig::defaults_for(DatasetName::Cifar10, "/d".into());
        cfg.teacher_temperature = 0.5;
        assert!(cfg.validate().is_err(), "teacher temp above student temp");
        let mut cfg = ExperimentConfig::defaults_for(DatasetName::Cifar10, "/d".into());
        cfg.version = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_semantic_changes_only() {
        let a = ExperimentConfig::defaults_for(DatasetName::Cifar10, "/d".into());
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
