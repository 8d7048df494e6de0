//! Representation quality measurement on a frozen backbone: linear
//! probe, weighted nearest-neighbor classification, and embedding export.
//!
//! All features are the backbone's global-average-pool outputs (before
//! the projection head), extracted with batch-norm in inference mode so
//! evaluation never updates or re-estimates statistics.

use crate::augment::{eval_view, stack_views, weak_augment, AugmentationPolicy};
use crate::data::{
    epoch_indices, open_split, BatchIter, DatasetName, NormStats, PackedDataset, SampleRecord,
    Split,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::model::EncoderNet;
use crate::nn::{BnMode, Linear};
use crate::optim::SgdMomentum;
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use crate::schedule::MilestoneSchedule;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Linear-probe protocol constants: 100 epochs of SGD on frozen
/// features, learning rate 30 at batch 256 (scaled linearly), decayed
/// by 0.1 at epochs 60 and 80, no weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` resolves to 30 × batch/256.
    pub base_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub seed: u64,
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        LinearEvalConfig {
            epochs: 100,
            batch_size: 256,
            base_lr: None,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![60, 80],
            factor: 0.1,
            seed: 0,
        }
    }
}

impl LinearEvalConfig {
    #[must_use]
    pub fn resolved_base_lr(&self) -> f64 {
        self.base_lr
            .unwrap_or(30.0 * self.batch_size as f64 / 256.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_decay != 0.0 {
            return Err(Error::Config(format!(
                "the linear probe runs without weight decay, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<MilestoneSchedule> {
        MilestoneSchedule::new(
            self.resolved_base_lr(),
            self.milestones.clone(),
            self.factor,
            self.epochs,
        )
    }
}

/// Outcome of an evaluation run; accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub per_class_accuracy: Vec<f64>,
    pub config_hash: String,
    pub checkpoint_ref: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.top1)
            || !(0.0..=100.0).contains(&self.top5)
            || self.top1 > self.top5
        {
            return Err(Error::Numeric(format!(
                "accuracies must satisfy 0 <= top1 <= top5 <= 100, got {} / {}",
                self.top1, self.top5
            )));
        }
        Ok(())
    }

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

/// Pooled backbone features for a set of records.
#[derive(Debug, Clone)]
pub struct FeatureSet<S> {
    /// [N, feature_dim]
    pub features: Array2<S>,
    pub labels: Vec<i32>,
    pub ids: Vec<u32>,
}

impl<S: Scalar> FeatureSet<S> {
    #[must_use]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Deterministic center-view backbone features for every record of a
/// split, batch-norm in inference mode.
pub fn extract_backbone_features<S: Scalar>(
    encoder: &mut EncoderNet<S>,
    dataset: &PackedDataset,
    stats: &NormStats,
    view_side: usize,
    batch_size: usize,
) -> Result<FeatureSet<S>> {
    let count = dataset.count();
    let mut features: Option<Array2<S>> = None;
    let mut labels = Vec::with_capacity(count);
    let mut ids = Vec::with_capacity(count);
    let mut row = 0usize;
    for batch in BatchIter::sequential(dataset, batch_size.max(1)) {
        let batch = batch?;
        let mut views: Vec<Array3<S>> = Vec::with_capacity(batch.len());
        for rec in &batch {
            views.push(eval_view(
                &rec.pixels,
                dataset.height(),
                dataset.width(),
                view_side,
                stats,
            )?);
            labels.push(rec.label);
            ids.push(rec.id);
        }
        let x = stack_views(&views)?;
        let feats = encoder.backbone.forward(&x, BnMode::Eval)?;
        let out = features.get_or_insert_with(|| Array2::zeros((count, feats.dim().1)));
        for r in feats.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    let features = features.unwrap_or_else(|| Array2::zeros((0, 0)));
    Ok(FeatureSet {
        features,
        labels,
        ids,
    })
}

/// Row-normalizes, mapping (numerically) zero rows to zero vectors
/// instead of failing; a zero feature row is then equidistant from
/// everything, which is the honest reading for similarity search.
fn normalize_rows_lenient<S: Scalar>(m: &Array2<S>) -> Array2<S> {
    let mut out = m.clone();
    let tiny = S::cast(1e-12);
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
        if n > tiny {
            row.mapv_inplace(|v| v / n);
        } else {
            row.fill(S::zero());
        }
    }
    out
}

/// Weighted-vote nearest-neighbor prediction over cosine similarity:
/// each of the `k` closest reference rows votes for its label with
/// weight exp(similarity / temperature).
pub fn knn_predict<S: Scalar>(
    reference: &FeatureSet<S>,
    queries: &Array2<S>,
    k: usize,
    temperature: f64,
    num_classes: usize,
) -> Result<Vec<usize>> {
    let n_ref = reference.len();
    if k == 0 || k > n_ref {
        return Err(Error::Config(format!(
            "k must lie in 1..={n_ref} (reference size), got {k}"
        )));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    for (i, &label) in reference.labels.iter().enumerate() {
        if label < 0 || label as usize >= num_classes {
            return Err(Error::Config(format!(
                "reference row {i} has label {label}, outside 0..{num_classes}"
            )));
        }
    }
    let ref_n = normalize_rows_lenient(&reference.features);
    let query_n = normalize_rows_lenient(queries);
    let sims = query_n.dot(&ref_n.t());
    let inv_t = S::cast(temperature.recip());
    let mut predictions = Vec::with_capacity(queries.dim().0);
    let mut order: Vec<usize> = Vec::new();
    for row in sims.rows() {
        order.clear();
        order.extend(0..n_ref);
        if k < n_ref {
            order.select_nth_unstable_by(k - 1, |&a, &b| {
                row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal)
            });
        }
        let mut scores = vec![S::zero(); num_classes];
        for &ix in &order[..k] {
            let w = (row[ix] * inv_t).exp();
            scores[reference.labels[ix] as usize] += w;
        }
        let best = scores
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(c, _)| c)
            .unwrap_or(0);
        predictions.push(best);
    }
    Ok(predictions)
}

/// Nearest-neighbor accuracy (percent) of `encoder`'s backbone features:
/// labeled train split as reference, test split as queries.
#[allow(clippy::too_many_arguments)]
pub fn knn_eval<S: Scalar>(
    encoder: &mut EncoderNet<S>,
    dataset: DatasetName,
    data_dir: &Path,
    stats: &NormStats,
    view_side: usize,
    k: usize,
    temperature: f64,
    batch_size: usize,
) -> Result<f64> {
    let (train_ds, _) = open_split(data_dir, dataset, Split::Train)?;
    let (test_ds, _) = open_split(data_dir, dataset, Split::Test)?;
    let reference = extract_backbone_features(encoder, &train_ds, stats, view_side, batch_size)?;
    let queries = extract_backbone_features(encoder, &test_ds, stats, view_side, batch_size)?;
    let preds = knn_predict(
        &reference,
        &queries.features,
        k,
        temperature,
        dataset.num_classes(),
    )?;
    let correct = preds
        .iter()
        .zip(queries.labels.iter())
        .filter(|(p, l)| **p as i64 == **l as i64)
        .count();
    Ok(100.0 * correct as f64 / queries.labels.len().max(1) as f64)
}

/// Mean softmax cross-entropy against integer labels, with the logit
/// gradient (softmax minus one-hot, divided by the batch size).
fn softmax_xent<S: Scalar>(logits: &Array2<S>, labels: &[usize]) -> Result<(S, Array2<S>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape("label count differs from batch".into()));
    }
    let b_s = S::cast_usize(b);
    let mut dlogits = Array2::<S>::zeros((b, c));
    let mut loss = S::zero();
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut denom = S::zero();
        for &v in row.iter() {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        let y = labels[i];
        if y >= c {
            return Err(Error::Shape(format!("label {y} outside 0..{c}")));
        }
        loss -= (row[y] - max) - log_denom;
        for j in 0..c {
            let p = ((row[j] - max) - log_denom).exp();
            dlogits[[i, j]] = (p - if j == y { S::one() } else { S::zero() }) / b_s;
        }
    }
    Ok((loss / b_s, dlogits))
}

fn batch_weak_views<S: Scalar>(
    batch: &[SampleRecord],
    src_h: usize,
    src_w: usize,
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: u64,
) -> Result<ndarray::Array4<S>> {
    let mut views = Vec::with_capacity(batch.len());
    for rec in batch {
        let mut rng = derive_rng(seed, "probe-view", &[epoch, u64::from(rec.id)]);
        views.push(weak_augment(
            &rec.pixels,
            src_h,
            src_w,
            policy,
            &mut rng,
        )?);
    }
    stack_views(&views)
}

/// A quick order-independent digest of parameter bytes, used to verify
/// the frozen-backbone invariant.
pub fn param_checksum<S: Scalar>(encoder: &mut EncoderNet<S>) -> u64 {
    let mut params = Vec::new();
    encoder.collect_params("", &mut params);
    let mut acc = 0xcbf2_9ce4_8422_2325u64;
    for (name, p) in params {
        for b in name.as_bytes() {
            acc = (acc ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        for v in p.value.iter() {
            acc = (acc ^ v.as_f64().to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    acc
}

/// Trains a linear classifier on frozen backbone features and reports
/// test accuracy. The backbone never updates: parameters receive no
/// optimizer step and batch norm runs in inference mode throughout.
/// Training views use the weak crop+flip pipeline; test views are
/// deterministic center views.
#[allow(clippy::too_many_arguments)]
pub fn linear_eval<S: Scalar>(
    encoder: &mut EncoderNet<S>,
    dataset: DatasetName,
    data_dir: &Path,
    stats: &NormStats,
    view_side: usize,
    cfg: &LinearEvalConfig,
    config_hash: String,
    checkpoint_ref: String,
    metrics: Option<&mut MetricsWriter>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let (train_ds, train_manifest) = open_split(data_dir, dataset, Split::Train)?;
    let (test_ds, _) = open_split(data_dir, dataset, Split::Test)?;
    let num_classes = dataset.num_classes();
    if train_manifest.num_classes as usize != num_classes {
        return Err(Error::Config(format!(
            "split manifest reports {} classes but {dataset} has {num_classes}",
            train_manifest.num_classes
        )));
    }
    let frozen_before = param_checksum(encoder);

    let feature_dim = encoder.backbone.arch().feature_dim();
    let mut rng = derive_rng(cfg.seed, "probe-init", &[]);
    let mut classifier = Linear::<S>::new(feature_dim, num_classes, true, &mut rng);
    let mut optimizer = SgdMomentum::<S>::new(cfg.momentum, cfg.weight_decay);
    let policy = AugmentationPolicy::weak(view_side, *stats);
    let mut metrics = metrics;

    for epoch in 0..cfg.epochs {
        let lr = S::cast(schedule.lr_at_epoch(epoch));
        let order = epoch_indices(train_ds.count(), cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for batch in BatchIter::new(&train_ds, order, cfg.batch_size, false) {
            let batch = batch?;
            let x = batch_weak_views::<S>(
                &batch,
                train_ds.height(),
                train_ds.width(),
                &policy,
                cfg.seed,
                epoch as u64,
            )?;
            let feats = encoder.backbone.forward(&x, BnMode::Eval)?;
            let logits = classifier.forward(&feats)?;
            let labels: Vec<usize> = batch
                .iter()
                .map(|r| {
                    usize::try_from(r.label).map_err(|_| {
                        Error::Config(format!("record {} is unlabeled; cannot probe", r.id))
                    })
                })
                .collect::<Result<_>>()?;
            let (loss, dlogits) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "probe loss became non-finite at epoch {epoch}"
                )));
            }
            classifier.weight.zero_grad();
            if let Some(b) = &mut classifier.bias {
                b.zero_grad();
            }
            classifier.backward(&feats, &dlogits, false)?;
            let mut params = Vec::new();
            classifier.collect_params("classifier", &mut params);
            optimizer.step(&mut params, lr)?;
            epoch_loss += loss.as_f64();
            batches += 1;
        }
        if let Some(w) = metrics.as_deref_mut() {
            w.write_row(&MetricsRow::Epoch {
                epoch: epoch as u64,
                mean_loss: epoch_loss / batches.max(1) as f64,
                knn_top1: None,
            })?;
        }
    }

    // Test pass: deterministic center views, exact counts.
    let test_feats = extract_backbone_features(encoder, &test_ds, stats, view_side, cfg.batch_size)?;
    let logits = classifier.forward(&test_feats.features)?;
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    let mut class_total = vec![0usize; num_classes];
    let mut class_hits = vec![0usize; num_classes];
    for (i, &label) in test_feats.labels.iter().enumerate() {
        let y = usize::try_from(label).map_err(|_| {
            Error::Config(format!("test record {} is unlabeled", test_feats.ids[i]))
        })?;
        if y >= num_classes {
            return Err(Error::Config(format!(
                "test label {y} outside 0..{num_classes}"
            )));
        }
        let row = logits.row(i);
        let mut ranked: Vec<usize> = (0..num_classes).collect();
        ranked.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        class_total[y] += 1;
        if ranked[0] == y {
            top1_hits += 1;
            class_hits[y] += 1;
        }
        if ranked[..5.min(num_classes)].contains(&y) {
            top5_hits += 1;
        }
    }
    let n_test = test_feats.labels.len().max(1);

    let frozen_after = param_checksum(encoder);
    if frozen_before != frozen_after {
        return Err(Error::Numeric(
            "frozen-backbone invariant violated: parameters changed during the probe".into(),
        ));
    }

    let report = EvalReport {
        top1: 100.0 * top1_hits as f64 / n_test as f64,
        top5: 100.0 * top5_hits as f64 / n_test as f64,
        per_class_accuracy: class_hits
            .iter()
            .zip(class_total.iter())
            .map(|(h, t)| 100.0 * *h as f64 / (*t).max(1) as f64)
            .collect(),
        config_hash,
        checkpoint_ref,
    };
    report.validate()?;
    Ok(report)
}

pub const EMBEDDING_MAGIC: &[u8; 7] = b"RSSLEMB";
pub const EMBEDDING_VERSION: u32 = 1;

/// Writes `(id, label, dim × f32)` rows for every record of the split,
/// little-endian, after the header (magic, version, count, dim).
pub fn export_embeddings<S: Scalar>(
    encoder: &mut EncoderNet<S>,
    dataset: &PackedDataset,
    stats: &NormStats,
    view_side: usize,
    batch_size: usize,
    out_path: &Path,
) -> Result<(usize, usize)> {
    let set = extract_backbone_features(encoder, dataset, stats, view_side, batch_size)?;
    let (count, dim) = set.features.dim();
    let file = std::fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(out_path, e);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(count as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for i in 0..count {
        w.write_all(&set.ids[i].to_le_bytes()).map_err(io)?;
        w.write_all(&set.labels[i].to_le_bytes()).map_err(io)?;
        for &v in set.features.row(i).iter() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok((count, dim))
}

/// Reads an embedding file back: ids, labels, and the [N, D] matrix.
pub fn read_embeddings(path: &Path) -> Result<(Vec<u32>, Vec<i32>, Array2<f32>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(fail("not an embedding file (bad magic)"));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf).map_err(io)?;
    if u32::from_le_bytes(u32_buf) != EMBEDDING_VERSION {
        return Err(fail("unsupported embedding file version"));
    }
    r.read_exact(&mut u32_buf).map_err(io)?;
    let count = u32::from_le_bytes(u32_buf) as usize;
    r.read_exact(&mut u32_buf).map_err(io)?;
    let dim = u32::from_le_bytes(u32_buf) as usize;
    let mut ids = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        r.read_exact(&mut u32_buf).map_err(io)?;
        ids.push(u32::from_le_bytes(u32_buf));
        r.read_exact(&mut u32_buf).map_err(io)?;
        labels.push(i32::from_le_bytes(u32_buf));
        for _ in 0..dim {
            r.read_exact(&mut u32_buf).map_err(io)?;
            data.push(f32::from_le_bytes(u32_buf));
        }
    }
    let features = Array2::from_shape_vec((count, dim), data)
        .map_err(|e| fail(&format!("bad embedding shape: {e}")))?;
    Ok((ids, labels, features))
}
