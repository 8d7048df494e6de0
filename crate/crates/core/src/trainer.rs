//! End-to-end pretraining: per-step schedule, the six-stage training
//! step (augment, embed, loss, student update, teacher momentum update,
//! enqueue), epoch loop with rolling checkpoints, metrics, and collapse
//! monitoring.

use crate::augment::{make_view_pair, stack_views, AugmentationPolicy};
use crate::checkpoint::{
    best_checkpoint_path, epoch_checkpoint_path, latest_checkpoint, load_checkpoint,
    prune_checkpoints, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};
use crate::config::{ExperimentConfig, Objective, TeacherAugmentation};
use crate::data::{epoch_indices, open_split, BatchIter, NormStats, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::model::{l2_normalize_backward, l2_normalize_with_norms, StudentTeacherPair};
use crate::optim::SgdMomentum;
use crate::relational::{
    cosine_loss, ema_update, entropy, info_nce_loss, relation_distributions,
    relational_loss_multicrop, MemoryQueue, TemperaturePair,
};
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use crate::schedule::LrSchedule;
use ndarray::{Array2, Array3, Ix2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Nearest-neighbor monitor constants: neighbors and vote temperature.
pub const KNN_MONITOR_K: usize = 200;
pub const KNN_MONITOR_TEMPERATURE: f64 = 0.07;

/// Mutable training state: the two encoders, the embedding queue, the
/// optimizer's velocity buffers, and the progress counters. Every random
/// stream is derived from (seed, epoch, step) counters, so the counters
/// double as the complete generator state.
pub struct TrainState<S> {
    pub pair: StudentTeacherPair<S>,
    pub queue: MemoryQueue<S>,
    pub optimizer: SgdMomentum<S>,
    pub completed_epochs: u64,
    pub global_step: u64,
    pub best_knn_top1: Option<f64>,
    pub best_knn_epoch: Option<u64>,
}

/// Queue pre-filled with seeded random unit vectors: relation
/// distributions are then defined from the very first step, and the
/// uninformative random targets are fully evicted after capacity/batch
/// steps of FIFO turnover.
pub fn random_unit_queue<S: Scalar>(
    capacity: usize,
    dim: usize,
    seed: u64,
) -> Result<MemoryQueue<S>> {
    let mut rng = derive_rng(seed, "queue-init", &[]);
    let normal = StandardNormal;
    let mut buf = Array2::<S>::zeros((capacity, dim));
    for mut row in buf.rows_mut() {
        loop {
            let vals: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm_sq: f64 = vals.iter().map(|v| v * v).sum();
            if norm_sq > 1e-24 {
                let inv = norm_sq.sqrt().recip();
                for (slot, v) in row.iter_mut().zip(vals) {
                    *slot = S::cast(v * inv);
                }
                break;
            }
        }
    }
    MemoryQueue::from_parts(buf, 0, capacity)
}

impl<S: Scalar> TrainState<S> {
    pub fn init(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let pair = StudentTeacherPair::init(
            config.resolved_arch(),
            config.head,
            S::cast(config.resolved_ema_momentum()),
            config.objective == Objective::ByolStyle,
            config.seed,
        );
        let queue = random_unit_queue(
            config.resolved_queue_capacity(),
            config.head.output_dim,
            config.seed,
        )?;
        Ok(TrainState {
            pair,
            queue,
            optimizer: SgdMomentum::new(config.sgd_momentum, config.weight_decay),
            completed_epochs: 0,
            global_step: 0,
            best_knn_top1: None,
            best_knn_epoch: None,
        })
    }
}

/// Per-step observables; `step` is the 1-based ordinal of the step.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub teacher_entropy: f64,
}

/// A completed step: its metrics plus the normalized teacher embeddings
/// that were appended to the queue.
#[derive(Debug)]
pub struct StepOutcome<S> {
    pub metrics: StepMetrics,
    pub teacher_embeddings: Array2<S>,
}

/// Watches the mean teacher entropy H(p¹) for the two degenerate modes:
/// persistently sharp (entropy under 1% of log K — the target carries
/// almost no relational information) and persistently uniform (entropy
/// within 0.5% of log K after the first epoch — embeddings have
/// collapsed toward a point, so every relation looks the same).
#[derive(Debug, Clone)]
pub struct CollapseMonitor {
    log_k: f64,
    consecutive_sharp: usize,
    consecutive_uniform: usize,
    pub sharp_warned: bool,
    pub uniform_warned: bool,
}

/// Consecutive steps a degenerate entropy must persist to count.
pub const COLLAPSE_WINDOW: usize = 20;
const SHARP_FRACTION: f64 = 0.01;
const UNIFORM_FRACTION: f64 = 0.995;

impl CollapseMonitor {
    #[must_use]
    pub fn new(queue_capacity: usize) -> Self {
        CollapseMonitor {
            log_k: (queue_capacity.max(2) as f64).ln(),
            consecutive_sharp: 0,
            consecutive_uniform: 0,
            sharp_warned: false,
            uniform_warned: false,
        }
    }

    pub fn observe(&mut self, teacher_entropy: f64, epoch: u64) {
        if teacher_entropy < SHARP_FRACTION * self.log_k {
            self.consecutive_sharp += 1;
        } else {
            self.consecutive_sharp = 0;
        }
        // The first epoch starts from random targets whose entropy is
        // legitimately high, so the uniform trigger gets a grace epoch.
        if epoch >= 1 && teacher_entropy > UNIFORM_FRACTION * self.log_k {
            self.consecutive_uniform += 1;
        } else {
            self.consecutive_uniform = 0;
        }
        if self.consecutive_sharp >= COLLAPSE_WINDOW && !self.sharp_warned {
            self.sharp_warned = true;
            log::warn!(
                "collapse warning: teacher entropy persistently below {:.4} ({}% of log K) — \
                 the teacher target is near-deterministic",
                SHARP_FRACTION * self.log_k,
                SHARP_FRACTION * 100.0
            );
        }
        if self.consecutive_uniform >= COLLAPSE_WINDOW && !self.uniform_warned {
            self.uniform_warned = true;
            log::warn!(
                "collapse warning: teacher entropy persistently above {:.4} ({}% of log K) — \
                 relations are near-uniform, embeddings have likely collapsed",
                UNIFORM_FRACTION * self.log_k,
                UNIFORM_FRACTION * 100.0
            );
        }
    }

    #[must_use]
    pub fn any_warning(&self) -> bool {
        self.sharp_warned || self.uniform_warned
    }
}

/// Final summary of a pretraining run, written as JSON next to the
/// checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub completed_epochs: u64,
    pub global_step: u64,
    pub final_mean_loss: f64,
    pub collapse_sharp_warning: bool,
    pub collapse_uniform_warning: bool,
    pub best_knn_top1: Option<f64>,
    pub best_knn_epoch: Option<u64>,
    pub final_checkpoint: String,
}

impl TrainReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
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

/// Owns one pretraining run's immutable setup (config, schedule,
/// augmentation policies) plus its mutable [`TrainState`].
pub struct Trainer<S: Scalar> {
    config: ExperimentConfig,
    schedule: LrSchedule,
    temps: TemperaturePair<S>,
    teacher_policy: AugmentationPolicy,
    student_policy: AugmentationPolicy,
    crop_sides: Vec<usize>,
    src_side: usize,
    pub state: TrainState<S>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        config: &ExperimentConfig,
        stats: &NormStats,
        src_side: usize,
        schedule: LrSchedule,
    ) -> Result<Self> {
        config.validate()?;
        let view_side = config.resolved_view_side();
        let teacher_policy = match config.teacher_augmentation {
            TeacherAugmentation::Weak => AugmentationPolicy::weak(view_side, *stats),
            TeacherAugmentation::Contrastive => AugmentationPolicy::contrastive(view_side, *stats),
        };
        let student_policy = AugmentationPolicy::contrastive(view_side, *stats);
        Ok(Trainer {
            config: config.clone(),
            schedule,
            temps: config.temperatures::<S>()?,
            teacher_policy,
            student_policy,
            crop_sides: config.multicrop_sides(),
            src_side,
            state: TrainState::init(config)?,
        })
    }

    #[must_use]
    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// One full training step in the fixed order: (1) augment teacher and
    /// student views, (2) embed and normalize both paths (teacher without
    /// gradients), (3) objective and analytic student gradient, (4) SGD
    /// update of the student only, (5) momentum update of the teacher,
    /// (6) enqueue the teacher embeddings.
    pub fn train_step(&mut self, batch: &[SampleRecord], epoch: u64) -> Result<StepOutcome<S>> {
        if batch.is_empty() {
            return Err(Error::Shape("empty training batch".into()));
        }
        let lr = S::cast(self.schedule.lr_at(self.state.global_step));

        // (1) Augment.
        let n_rungs = self.crop_sides.len();
        let mut teacher_views: Vec<Array3<S>> = Vec::with_capacity(batch.len());
        let mut rung_views: Vec<Vec<Array3<S>>> = (0..n_rungs)
            .map(|_| Vec::with_capacity(batch.len()))
            .collect();
        for rec in batch {
            let views = make_view_pair::<S>(
                &rec.pixels,
                self.src_side,
                self.src_side,
                rec.id,
                &self.teacher_policy,
                &self.student_policy,
                &self.crop_sides,
                self.config.seed,
                epoch,
            )?;
            teacher_views.push(views.teacher_view);
            for (r, v) in views.student_views.into_iter().enumerate() {
                rung_views[r].push(v);
            }
        }

        // (2) Embed. The teacher runs without caches (nothing ever
        // backpropagates into it) and with grouped normalization
        // statistics; the student keeps caches for the backward pass.
        let teacher_batch = stack_views(&teacher_views)?;
        let z_teacher_raw = self
            .state
            .pair
            .teacher
            .forward_embed(&teacher_batch, self.config.bn_groups)?;
        let (z_teacher, _) = l2_normalize_with_norms(&z_teacher_raw.vectors)?;

        let mut caches = Vec::with_capacity(n_rungs);
        let mut student_norm = Vec::with_capacity(n_rungs);
        let mut student_norms = Vec::with_capacity(n_rungs);
        let mut student_raw = Vec::with_capacity(n_rungs);
        for views in rung_views {
            let x = stack_views(&views)?;
            let (emb, cache) = self.state.pair.student.forward_embed_train(x)?;
            let (zn, norms) = l2_normalize_with_norms(&emb.vectors)?;
            caches.push(cache);
            student_norm.push(zn);
            student_norms.push(norms);
            student_raw.push(emb.vectors);
        }

        // (3) Objective. Gradients flow to the student path only; the
        // teacher side enters every loss as a constant.
        for (_, p) in self.state.pair.trainable_params() {
            p.zero_grad();
        }
        let n_scale = S::cast_usize(n_rungs);
        let loss = match self.config.objective {
            Objective::Ressl => {
                let (loss, grads, _) = relational_loss_multicrop(
                    &z_teacher,
                    &student_norm,
                    &self.state.queue,
                    &self.temps,
                )?;
                for r in 0..n_rungs {
                    let dz = l2_normalize_backward(&student_norm[r], &student_norms[r], &grads[r]);
                    self.state.pair.student.backward(&caches[r], &dz)?;
                }
                loss
            }
            Objective::InfoNce => {
                let mut total = S::zero();
                for r in 0..n_rungs {
                    let out = info_nce_loss(
                        &student_norm[r],
                        &z_teacher,
                        &self.state.queue,
                        self.temps.student(),
                    )?;
                    total += out.loss / n_scale;
                    let scaled = out.grad_query.mapv(|v| v / n_scale);
                    let dz = l2_normalize_backward(&student_norm[r], &student_norms[r], &scaled);
                    self.state.pair.student.backward(&caches[r], &dz)?;
                }
                total
            }
            Objective::ByolStyle => {
                let mut total = S::zero();
                for r in 0..n_rungs {
                    let predictor = self
                        .state
                        .pair
                        .predictor
                        .as_mut()
                        .ok_or_else(|| Error::Config("predictor objective without predictor".into()))?;
                    let (pred, pred_cache) = predictor.forward_train(student_raw[r].clone())?;
                    let out = cosine_loss(&pred, &z_teacher_raw.vectors)?;
                    total += out.loss / n_scale;
                    let scaled = out.grad_pred.mapv(|v| v / n_scale);
                    let dx = predictor
                        .backward(&pred_cache, &scaled, true)?
                        .expect("dx requested");
                    self.state.pair.student.backward(&caches[r], &dx)?;
                }
                total
            }
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {}",
                self.state.global_step + 1
            )));
        }
        let teacher_entropy = {
            let p1 = relation_distributions(&z_teacher, &self.state.queue, self.temps.teacher())?;
            let mut h = S::zero();
            for row in p1.rows() {
                h += entropy(&row);
            }
            (h / S::cast_usize(p1.dim().0)).as_f64()
        };

        // (4) Optimizer updates the student (and predictor) only.
        let mut params = self.state.pair.trainable_params();
        self.state.optimizer.step(&mut params, lr)?;

        // (5) Teacher follows the student by momentum.
        ema_update(&mut self.state.pair)?;

        // (6) The step's teacher embeddings become the newest queue rows.
        self.state.queue.enqueue(&z_teacher)?;

        self.state.global_step += 1;
        Ok(StepOutcome {
            metrics: StepMetrics {
                step: self.state.global_step,
                epoch,
                lr: lr.as_f64(),
                loss: loss.as_f64(),
                teacher_entropy,
            },
            teacher_embeddings: z_teacher,
        })
    }

    /// Serializes model, optimizer, and queue state into one checkpoint.
    pub fn write_checkpoint(&mut self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            completed_epochs: self.state.completed_epochs,
            global_step: self.state.global_step,
            queue_cursor: self.state.queue.cursor() as u64,
            queue_filled: self.state.queue.len() as u64,
            best_knn_top1: self.state.best_knn_top1,
            best_knn_epoch: self.state.best_knn_epoch,
        };
        let mut tensors = self.state.pair.export_tensors();
        for (name, v) in self.state.optimizer.export_state() {
            tensors.push((format!("optimizer.{name}"), v));
        }
        tensors.push((
            "queue.storage".to_string(),
            self.state.queue.as_matrix().clone().into_dyn(),
        ));
        save_checkpoint(path, &meta, &tensors)
    }

    /// Restores a checkpoint written by [`Trainer::write_checkpoint`] for
    /// the same configuration.
    pub fn restore_checkpoint(&mut self, path: &Path) -> Result<()> {
        let (meta, tensors) = load_checkpoint::<S>(path)?;
        if meta.config.hash() != self.config.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint at {} was written by configuration {} but this run is {}",
                path.display(),
                meta.config.hash(),
                self.config.hash()
            )));
        }
        let mut model_tensors = HashMap::new();
        let mut optimizer_state = Vec::new();
        let mut queue_storage = None;
        for (name, tensor) in tensors {
            if let Some(rest) = name.strip_prefix("optimizer.") {
                optimizer_state.push((rest.to_string(), tensor));
            } else if name == "queue.storage" {
                queue_storage = Some(tensor);
            } else {
                model_tensors.insert(name, tensor);
            }
        }
        self.state.pair.import_tensors(&model_tensors)?;
        self.state.optimizer.import_state(optimizer_state);
        let storage = queue_storage
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks queue.storage".into()))?
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Checkpoint(format!("queue storage: {e}")))?;
        self.state.queue = MemoryQueue::from_parts(
            storage,
            meta.queue_cursor as usize,
            meta.queue_filled as usize,
        )?;
        self.state.completed_epochs = meta.completed_epochs;
        self.state.global_step = meta.global_step;
        self.state.best_knn_top1 = meta.best_knn_top1;
        self.state.best_knn_epoch = meta.best_knn_epoch;
        Ok(())
    }
}

/// Rebuilds the student/teacher encoders (and predictor, if the run
/// trained one) from a checkpoint, ignoring optimizer and queue tensors.
/// The scalar type must match the checkpoint's stored precision.
pub fn load_encoder_pair<S: Scalar>(
    path: &Path,
) -> Result<(CheckpointMeta, StudentTeacherPair<S>)> {
    let (meta, tensors) = load_checkpoint::<S>(path)?;
    let mut pair = StudentTeacherPair::init(
        meta.config.resolved_arch(),
        meta.config.head,
        S::cast(meta.config.resolved_ema_momentum()),
        meta.config.objective == Objective::ByolStyle,
        meta.config.seed,
    );
    let model_tensors: HashMap<String, ndarray::ArrayD<S>> = tensors
        .into_iter()
        .filter(|(name, _)| !name.starts_with("optimizer.") && name != "queue.storage")
        .collect();
    pair.import_tensors(&model_tensors)?;
    Ok((meta, pair))
}

/// Runs (or resumes) pretraining and returns the final report.
///
/// Artifacts under `out_dir`: `config.toml`, `metrics.jsonl`, rolling
/// epoch checkpoints (last two), `checkpoint-best.ckpt` when the monitor
/// is active, and `train_report.json`.
pub fn train<S: Scalar>(
    config: &ExperimentConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainReport> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (dataset, manifest) = open_split(&config.data_dir, config.dataset, Split::Pretrain)?;
    if dataset.height() != dataset.width() {
        return Err(Error::Config(format!(
            "training expects square images, got {}x{}",
            dataset.height(),
            dataset.width()
        )));
    }
    let steps_per_epoch = dataset.count() / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "dataset of {} records yields zero batches of {}",
            dataset.count(),
            config.batch_size
        )));
    }
    let schedule = LrSchedule::pretrain(
        config.batch_size,
        config.base_lr,
        config.warmup_epochs,
        config.epochs,
        steps_per_epoch,
    )?;
    let mut trainer = Trainer::<S>::new(config, &manifest.stats, dataset.height(), schedule)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = if resume {
        if let Some((_, ckpt)) = latest_checkpoint(out_dir)? {
            trainer.restore_checkpoint(&ckpt)?;
            MetricsWriter::resume(
                &metrics_path,
                trainer.state.completed_epochs.saturating_sub(1),
            )?
        } else {
            MetricsWriter::append(&metrics_path)?
        }
    } else {
        if metrics_path.exists() {
            std::fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        }
        MetricsWriter::append(&metrics_path)?
    };
    config.save_toml(&out_dir.join("config.toml"))?;

    let mut monitor = CollapseMonitor::new(config.resolved_queue_capacity());
    let mut last_mean_loss = f64::NAN;
    let start_epoch = trainer.state.completed_epochs;
    if start_epoch >= config.epochs as u64 {
        // The run already finished; hand back its report rather than
        // rewriting it from a loop that will not execute.
        if let Ok(prior) = TrainReport::load(&out_dir.join("train_report.json")) {
            if prior.config_hash == config.hash() {
                return Ok(prior);
            }
        }
        for row in crate::metrics::read_metrics(&metrics_path)? {
            if let MetricsRow::Epoch { mean_loss, .. } = row {
                last_mean_loss = mean_loss;
            }
        }
    }
    for epoch in start_epoch..config.epochs as u64 {
        let order = epoch_indices(dataset.count(), config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in BatchIter::new(&dataset, order, config.batch_size, true) {
            let batch = batch?;
            let outcome = match trainer.train_step(&batch, epoch) {
                Ok(o) => o,
                Err(e) => {
                    // Freeze the failing state for postmortem before
                    // surfacing the error.
                    let snapshot = out_dir.join("checkpoint-diagnostic.ckpt");
                    let note = match trainer.write_checkpoint(&snapshot) {
                        Ok(()) => format!("diagnostic snapshot at {}", snapshot.display()),
                        Err(w) => format!("diagnostic snapshot failed: {w}"),
                    };
                    return Err(Error::Numeric(format!("aborting training: {e}; {note}")));
                }
            };
            let m = outcome.metrics;
            metrics.write_row(&MetricsRow::Step {
                step: m.step,
                epoch: m.epoch,
                lr: m.lr,
                loss: m.loss,
                teacher_entropy: m.teacher_entropy,
            })?;
            monitor.observe(m.teacher_entropy, epoch);
            loss_sum += m.loss;
            steps += 1;
        }
        last_mean_loss = loss_sum / steps.max(1) as f64;
        trainer.state.completed_epochs = epoch + 1;

        let knn_top1 = if config.knn_monitor_every > 0
            && (epoch + 1) % config.knn_monitor_every as u64 == 0
        {
            let (train_split, _) = open_split(&config.data_dir, config.dataset, Split::Train)?;
            let k = KNN_MONITOR_K.min(train_split.count());
            drop(train_split);
            Some(eval::knn_eval(
                &mut trainer.state.pair.teacher,
                config.dataset,
                &config.data_dir,
                &manifest.stats,
                config.resolved_view_side(),
                k,
                KNN_MONITOR_TEMPERATURE,
                config.batch_size,
            )?)
        } else {
            None
        };
        metrics.write_row(&MetricsRow::Epoch {
            epoch,
            mean_loss: last_mean_loss,
            knn_top1,
        })?;
        if let Some(top1) = knn_top1 {
            if trainer.state.best_knn_top1.is_none_or(|b| top1 > b) {
                trainer.state.best_knn_top1 = Some(top1);
                trainer.state.best_knn_epoch = Some(epoch);
                trainer.write_checkpoint(&best_checkpoint_path(out_dir))?;
            }
        }
        trainer.write_checkpoint(&epoch_checkpoint_path(out_dir, epoch + 1))?;
        prune_checkpoints(out_dir, 2)?;
    }

    let final_checkpoint = epoch_checkpoint_path(out_dir, config.epochs as u64);
    let report = TrainReport {
        config_hash: config.hash(),
        completed_epochs: trainer.state.completed_epochs,
        global_step: trainer.state.global_step,
        final_mean_loss: last_mean_loss,
        collapse_sharp_warning: monitor.sharp_warned,
        collapse_uniform_warning: monitor.uniform_warned,
        best_knn_top1: trainer.state.best_knn_top1,
        best_knn_epoch: trainer.state.best_knn_epoch,
        final_checkpoint: final_checkpoint.display().to_string(),
    };
    report.save(&out_dir.join("train_report.json"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        manifest_path, packed_path, sha256_file, DatasetManifest, DatasetName, PackedWriter,
    };
    use crate::model::BackboneArch;
    use crate::relational::relational_loss;
    use tempfile::tempdir;

    /// Small config against a synthetic 16x16 dataset.
    fn toy_config(data_dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults_for(DatasetName::Cifar10, data_dir.into());
        cfg.batch_size = 4;
        cfg.bn_groups = 2;
        cfg.epochs = 2;
        cfg.warmup_epochs = 1;
        cfg.queue_capacity = Some(8);
        cfg.view_side = Some(16);
        cfg.head = crate::model::ProjectionHeadSpec {
            hidden_dim: 32,
            output_dim: 16,
        };
        cfg.arch = Some(BackboneArch::Resnet18Small);
        cfg
    }

    fn write_toy_dataset(dir: &Path, train_n: u32, test_n: u32) {
        let stats = NormStats {
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        };
        for (split, n) in [(Split::Train, train_n), (Split::Test, test_n)] {
            let path = packed_path(dir, DatasetName::Cifar10, split);
            let mut w = PackedWriter::create(&path, n, 16, 16).unwrap();
            let mut histogram = vec![0u64; 10];
            for i in 0..n {
                let label = (i % 2) as i32;
                let px: Vec<u8> = (0..16 * 16 * 3)
                    .map(|j| (40 + 120 * label as usize + (i as usize * 31 + j * 7) % 40) as u8)
                    .collect();
                w.write_record(i, label, &px).unwrap();
                histogram[label as usize] += 1;
            }
            w.finish().unwrap();
            DatasetManifest {
                format_version: 1,
                name: DatasetName::Cifar10,
                split,
                count: u64::from(n),
                image_height: 16,
                image_width: 16,
                num_classes: 10,
                class_histogram: histogram,
                unlabeled_count: 0,
                packed_sha256: sha256_file(&path).unwrap(),
                stats,
            }
            .save(&manifest_path(dir, DatasetName::Cifar10, split))
            .unwrap();
        }
    }

    fn toy_stats() -> NormStats {
        NormStats {
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        }
    }

    fn toy_batch(n: u32) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| SampleRecord {
                id: i,
                label: (i % 2) as i32,
                pixels: (0..16 * 16 * 3)
                    .map(|j| ((i as usize * 53 + j * 11) % 251) as u8)
                    .collect(),
            })
            .collect()
    }

    fn make_trainer(cfg: &ExperimentConfig, peak_lr: f64) -> Trainer<f32> {
        let schedule = LrSchedule::new(peak_lr, 1, 100).unwrap();
        Trainer::new(cfg, &toy_stats(), 16, schedule).unwrap()
    }

    /// Spot values, not running statistics: parameters only.
    fn param_snapshot(pair: &mut StudentTeacherPair<f32>) -> Vec<(String, ndarray::ArrayD<f32>)> {
        pair.export_tensors()
            .into_iter()
            .filter(|(name, _)| !name.contains("running_"))
            .collect()
    }

    #[test]
    fn random_queue_is_full_of_unit_rows_and_seed_stable() {
        let q1 = random_unit_queue::<f32>(32, 8, 7).unwrap();
        let q2 = random_unit_queue::<f32>(32, 8, 7).unwrap();
        assert!(q1.is_full());
        assert_eq!(q1.as_matrix(), q2.as_matrix());
        for row in q1.as_matrix().rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "row norm {n}");
        }
        let q3 = random_unit_queue::<f32>(32, 8, 8).unwrap();
        assert_ne!(q1.as_matrix(), q3.as_matrix());
    }

    #[test]
    fn first_loss_on_random_embeddings_is_near_log_capacity() {
        // The loss against a fresh random queue, evaluated on random unit
        // embeddings, sits at log K up to the student-temperature spread.
        let k = 256;
        let d = 128;
        let queue = random_unit_queue::<f64>(k, d, 3).unwrap();
        let z_t = random_unit_queue::<f64>(16, d, 4).unwrap().as_matrix().clone();
        let z_s = random_unit_queue::<f64>(16, d, 5).unwrap().as_matrix().clone();
        let temps = TemperaturePair::new(0.04, 0.1).unwrap();
        let out = relational_loss(&z_t, &z_s, &queue, &temps).unwrap();
        let log_k = (k as f64).ln();
        assert!(
            (out.loss - log_k).abs() <= 0.15 * log_k,
            "loss {} vs log K {log_k}",
            out.loss
        );
        assert!(out.teacher_entropy > 0.0 && out.teacher_entropy < log_k);
    }

    #[test]
    fn step_rotates_queue_updates_counters_and_stays_finite() {
        let dir = tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let mut trainer = make_trainer(&cfg, 0.05);
        let batch = toy_batch(4);
        let before = trainer.state.queue.snapshot_oldest_first();
        let out = trainer.train_step(&batch, 0).unwrap();
        assert_eq!(trainer.state.global_step, 1);
        assert_eq!(out.metrics.step, 1);
        assert!(out.metrics.loss.is_finite());
        assert!(out.metrics.teacher_entropy > 0.0);
        // FIFO postcondition: the batch's teacher embeddings occupy the
        // newest B slots, the oldest B rows of the initial fill are gone.
        let after = trainer.state.queue.snapshot_oldest_first();
        let k = trainer.state.queue.capacity();
        let b = batch.len();
        for i in 0..b {
            let newest = after.row(k - b + i);
            let expect = out.teacher_embeddings.row(i);
            assert_eq!(newest, expect, "slot {i}");
        }
        for i in 0..(k - b) {
            assert_eq!(after.row(i), before.row(i + b));
        }
    }

    #[test]
    fn zero_lr_and_unit_momentum_is_a_parameter_no_op() {
        let dir = tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.ema_momentum = Some(1.0);
        let mut trainer = make_trainer(&cfg, 0.0);
        let before = param_snapshot(&mut trainer.state.pair);
        trainer.train_step(&toy_batch(4), 0).unwrap();
        let after = param_snapshot(&mut trainer.state.pair);
        assert_eq!(before.len(), after.len());
        for ((name_a, a), (_, b)) in before.iter().zip(after.iter()) {
            assert_eq!(a, b, "parameter {name_a} changed in a no-op step");
        }
    }

    #[test]
    fn teacher_moves_only_through_momentum_and_student_through_sgd() {
        let dir = tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let mut trainer = make_trainer(&cfg, 0.05);
        let before = param_snapshot(&mut trainer.state.pair);
        trainer.train_step(&toy_batch(4), 0).unwrap();
        let after = param_snapshot(&mut trainer.state.pair);
        let mut student_moved = false;
        let mut teacher_moved = false;
        for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
            if a != b {
                if name.starts_with("student.") {
                    student_moved = true;
                }
                if name.starts_with("teacher.") {
                    teacher_moved = true;
                }
            }
        }
        assert!(student_moved, "optimizer must move the student");
        assert!(
            teacher_moved,
            "momentum 0.99 must move the teacher toward the student"
        );
        // Teacher = m * old_teacher + (1-m) * new_student, checked on one tensor.
        let name = before
            .iter()
            .find(|(n, _)| n.starts_with("teacher.") && n.ends_with("head.fc2.weight"))
            .map(|(n, _)| n.clone())
            .unwrap();
        let student_name = name.replacen("teacher.", "student.", 1);
        let old_t = &before.iter().find(|(n, _)| *n == name).unwrap().1;
        let new_t = &after.iter().find(|(n, _)| *n == name).unwrap().1;
        let new_s = &after.iter().find(|(n, _)| *n == student_name).unwrap().1;
        let m = 0.99f32;
        let expect = old_t.mapv(|v| v * m) + new_s.mapv(|v| v * (1.0 - m));
        let max_diff = new_t
            .iter()
            .zip(expect.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-6, "EMA identity violated, max diff {max_diff}");
    }

    #[test]
    fn nan_parameters_abort_the_step() {
        let dir = tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let mut trainer = make_trainer(&cfg, 0.05);
        for (name, p) in trainer.state.pair.trainable_params() {
            if name.ends_with("fc2.weight") {
                p.value.fill(f32::NAN);
            }
        }
        let err = trainer.train_step(&toy_batch(4), 0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err:?}");
    }

    #[test]
    fn steps_are_deterministic_across_fresh_trainers() {
        let dir = tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let run = || {
            let mut t = make_trainer(&cfg, 0.05);
            let mut losses = Vec::new();
            for step in 0..3 {
                let batch = toy_batch(4);
                let out = t.train_step(&batch, step / 2).unwrap();
                losses.push(out.metrics.loss);
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn alternative_objectives_run_and_move_the_student() {
        let dir = tempdir().unwrap();
        for objective in [Objective::InfoNce, Objective::ByolStyle] {
            let mut cfg = toy_config(dir.path());
            cfg.objective = objective;
            let mut trainer = make_trainer(&cfg, 0.05);
            let before = param_snapshot(&mut trainer.state.pair);
            let out = trainer.train_step(&toy_batch(4), 0).unwrap();
            assert!(out.metrics.loss.is_finite(), "{objective:?}");
            let after = param_snapshot(&mut trainer.state.pair);
            let moved = before
                .iter()
                .zip(after.iter())
                .any(|((n, a), (_, b))| n.starts_with("student.") && a != b);
            assert!(moved, "{objective:?} must update the student");
        }
    }

    #[test]
    fn collapse_monitor_fires_on_both_degenerate_modes() {
        let log_k = 4096f64.ln();
        let mut sharp = CollapseMonitor::new(4096);
        for _ in 0..COLLAPSE_WINDOW {
            sharp.observe(0.001 * log_k, 0);
        }
        assert!(sharp.sharp_warned && !sharp.uniform_warned);

        let mut uniform = CollapseMonitor::new(4096);
        for _ in 0..COLLAPSE_WINDOW {
            uniform.observe(0.999 * log_k, 5);
        }
        assert!(uniform.uniform_warned && !uniform.sharp_warned);

        // The same near-uniform entropies in epoch 0 get the grace period.
        let mut graced = CollapseMonitor::new(4096);
        for _ in 0..COLLAPSE_WINDOW {
            graced.observe(0.999 * log_k, 0);
        }
        assert!(!graced.any_warning());

        // Healthy mid-range entropy never warns, and interruptions reset
        // the persistence window.
        let mut healthy = CollapseMonitor::new(4096);
        for i in 0..200 {
            let h = if i % (COLLAPSE_WINDOW - 1) == 0 {
                0.5 * log_k
            } else {
                0.001 * log_k
            };
            healthy.observe(h, 3);
        }
        assert!(!healthy.any_warning());
    }

    #[test]
    fn checkpoint_resume_reproduces_the_uninterrupted_trajectory() {
        let dir = tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let batches: Vec<Vec<SampleRecord>> = (0..6)
            .map(|i| {
                toy_batch(4)
                    .into_iter()
                    .map(|mut r| {
                        r.id += 100 * i;
                        r
                    })
                    .collect()
            })
            .collect();

        // Uninterrupted run: 6 steps.
        let mut full = make_trainer(&cfg, 0.05);
        let mut full_losses = Vec::new();
        for batch in &batches {
            full_losses.push(full.train_step(batch, 0).unwrap().metrics.loss);
        }

        // Interrupted run: 3 steps, checkpoint, restore into a fresh
        // trainer, 3 more steps.
        let mut first = make_trainer(&cfg, 0.05);
        for batch in &batches[..3] {
            first.train_step(batch, 0).unwrap();
        }
        let ckpt = dir.path().join("mid.ckpt");
        first.write_checkpoint(&ckpt).unwrap();
        drop(first);

        let mut resumed = make_trainer(&cfg, 0.05);
        resumed.restore_checkpoint(&ckpt).unwrap();
        assert_eq!(resumed.state.global_step, 3);
        let mut tail = Vec::new();
        for batch in &batches[3..] {
            tail.push(resumed.train_step(batch, 0).unwrap().metrics.loss);
        }
        for (a, b) in full_losses[3..].iter().zip(tail.iter()) {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel <= 1e-5, "trajectories diverged: {a} vs {b}");
        }
    }

    #[test]
    fn restore_rejects_a_different_configuration() {
        let dir = tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let mut trainer = make_trainer(&cfg, 0.05);
        let ckpt = dir.path().join("c.ckpt");
        trainer.write_checkpoint(&ckpt).unwrap();
        let mut other_cfg = cfg.clone();
        other_cfg.seed = 99;
        let mut other = make_trainer(&other_cfg, 0.05);
        let err = other.restore_checkpoint(&ckpt).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");
    }

    #[test]
    fn end_to_end_smoke_run_writes_all_artifacts() {
        let dir = tempdir().unwrap();
        let data_dir = dir.path().join("data");
        std::fs::create_dir_all(&data_dir).unwrap();
        write_toy_dataset(&data_dir, 8, 4);
        let mut cfg = toy_config(&data_dir);
        cfg.knn_monitor_every = 1;
        let out_dir = dir.path().join("run");
        let report = train::<f32>(&cfg, &out_dir, false).unwrap();

        // 8 records / batch 4 = 2 steps per epoch, 2 epochs.
        assert_eq!(report.completed_epochs, 2);
        assert_eq!(report.global_step, 4);
        assert!(report.final_mean_loss.is_finite());
        assert!(report.best_knn_top1.is_some());

        let rows = crate::metrics::read_metrics(&out_dir.join("metrics.jsonl")).unwrap();
        let steps = rows
            .iter()
            .filter(|r| matches!(r, MetricsRow::Step { .. }))
            .count();
        let epochs = rows
            .iter()
            .filter(|r| matches!(r, MetricsRow::Epoch { .. }))
            .count();
        assert_eq!(steps, 4);
        assert_eq!(epochs, 2);
        // Warmup ramp: lr strictly increases over the first epoch's steps.
        let lrs: Vec<f64> = rows
            .iter()
            .filter_map(|r| match r {
                MetricsRow::Step { lr, .. } => Some(*lr),
                MetricsRow::Epoch { .. } => None,
            })
            .collect();
        assert!(lrs[0] < lrs[1], "warmup must ramp: {lrs:?}");
        assert!(lrs.iter().all(|l| l.is_finite() && *l >= 0.0));

        assert!(out_dir.join("config.toml").exists());
        assert!(out_dir.join("train_report.json").exists());
        assert!(epoch_checkpoint_path(&out_dir, 2).exists());
        assert!(best_checkpoint_path(&out_dir).exists());
        let reloaded = TrainReport::load(&out_dir.join("train_report.json")).unwrap();
        assert_eq!(reloaded.global_step, 4);

        // The final checkpoint reloads into a fresh trainer.
        let (dataset, manifest) =
            open_split(&cfg.data_dir, cfg.dataset, Split::Pretrain).unwrap();
        let schedule = LrSchedule::pretrain(cfg.batch_size, cfg.base_lr, 1, 2, 2).unwrap();
        let mut fresh =
            Trainer::<f32>::new(&cfg, &manifest.stats, dataset.height(), schedule).unwrap();
        fresh
            .restore_checkpoint(&epoch_checkpoint_path(&out_dir, 2))
            .unwrap();
        assert_eq!(fresh.state.completed_epochs, 2);

        // The encoder-only loader rebuilds the same weights.
        let (meta, mut pair) =
            load_encoder_pair::<f32>(&epoch_checkpoint_path(&out_dir, 2)).unwrap();
        assert_eq!(meta.global_step, 4);
        let probe = ndarray::Array4::<f32>::from_elem((2, 3, 16, 16), 0.3);
        let a = pair.teacher.forward_embed_eval(&probe).unwrap().vectors;
        let b = fresh
            .state
            .pair
            .teacher
            .forward_embed_eval(&probe)
            .unwrap()
            .vectors;
        assert_eq!(a, b);
    }

    #[test]
    fn identical_seeds_give_identical_metrics_files() {
        let dir = tempdir().unwrap();
        let data_dir = dir.path().join("data");
        std::fs::create_dir_all(&data_dir).unwrap();
        write_toy_dataset(&data_dir, 8, 4);
        let cfg = toy_config(&data_dir);
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        train::<f32>(&cfg, &out_a, false).unwrap();
        train::<f32>(&cfg, &out_b, false).unwrap();
        let bytes_a = std::fs::read(out_a.join("metrics.jsonl")).unwrap();
        let bytes_b = std::fs::read(out_b.join("metrics.jsonl")).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }
}
