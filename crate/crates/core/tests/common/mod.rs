//! Shared fixtures and deterministic mathematical checks used by both
//! the randomized property suite and the release gate.
//!
//! Every check takes an instance count, runs against a seeded stream of
//! random cases, and reports the first violation; callers decide how
//! many instances to demand and how to surface failures.

#![allow(dead_code)]

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ressl_core::config::ExperimentConfig;
use ressl_core::data::{
    manifest_path, packed_path, sha256_file, DatasetManifest, DatasetName, NormStats,
    PackedWriter, Split,
};
use ressl_core::model::ProjectionHeadSpec;
use ressl_core::relational::{
    cosine_loss, ema_blend, ema_update, entropy, mse_loss, relation_distributions,
    relational_loss, softmax_sims, MemoryQueue, TemperaturePair,
};
use ressl_core::Scalar;
use std::collections::VecDeque;
use std::path::Path;

pub fn unit_rows<S: Scalar>(rng: &mut impl Rng, b: usize, d: usize) -> Array2<S> {
    let mut m = Array2::<S>::zeros((b, d));
    for mut row in m.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = S::cast(rng.gen_range(-1.0..1.0));
            }
            let norm = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
            if norm > S::cast(1e-3) {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    m
}

pub fn full_queue<S: Scalar>(rng: &mut impl Rng, k: usize, d: usize) -> MemoryQueue<S> {
    let mut q = MemoryQueue::<S>::new(k, d).expect("queue dims");
    q.enqueue(&unit_rows(rng, k, d)).expect("unit rows");
    q
}

/// Every similarity distribution is a probability vector: entries in
/// (0, 1) and rows summing to one within 1e-6 (1e-4 on the f32 rail).
///
/// At very sharp temperatures the losing softmax tails drop below half
/// an ulp of 1, so the winning entry legitimately rounds to exactly 1.0;
/// strict sub-unity is therefore only asserted where it is representable
/// (cosine similarities span at most 2, so gap/τ stays small enough once
/// τ clears a per-precision floor).
pub fn check_distribution_normalization(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..instances {
        let k = rng.gen_range(2..=48);
        let d = rng.gen_range(2..=10);
        let b = rng.gen_range(1..=4);
        let tau = rng.gen_range(0.005..1.5);
        let queue = full_queue::<f64>(&mut rng, k, d);
        let z = unit_rows::<f64>(&mut rng, b, d);
        let probs = relation_distributions(&z, &queue, tau).map_err(|e| e.to_string())?;
        for (r, row) in probs.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(format!("instance {i} row {r}: sum {sum} off by >1e-6"));
            }
            let open_top = tau >= 0.06;
            if row
                .iter()
                .any(|&p| !(p > 0.0 && if open_top { p < 1.0 } else { p <= 1.0 }))
            {
                return Err(format!("instance {i} row {r}: entry outside (0,1)"));
            }
        }
    }
    // f32 rail with temperatures that keep exp() above underflow.
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for i in 0..instances / 4 {
        let k = rng.gen_range(2..=32);
        let d = rng.gen_range(2..=8);
        let tau = rng.gen_range(0.04..1.5) as f32;
        let queue = full_queue::<f32>(&mut rng, k, d);
        let z = unit_rows::<f32>(&mut rng, 2, d);
        let probs = relation_distributions(&z, &queue, tau).map_err(|e| e.to_string())?;
        for (r, row) in probs.rows().into_iter().enumerate() {
            let sum: f32 = row.sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(format!("f32 instance {i} row {r}: sum {sum} off by >1e-4"));
            }
            let open_top = tau >= 0.15;
            if row
                .iter()
                .any(|&p| !(p > 0.0 && if open_top { p < 1.0 } else { p <= 1.0 }))
            {
                return Err(format!("f32 instance {i} row {r}: entry outside (0,1)"));
            }
        }
    }
    Ok(())
}

fn cross_entropy_rows(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (pr, qr) in p.rows().into_iter().zip(q.rows()) {
        total -= pr.iter().zip(qr.iter()).map(|(&a, &b)| a * b.ln()).sum::<f64>();
    }
    total / p.dim().0 as f64
}

/// Cross-entropy dominates entropy, with equality exactly when the two
/// distributions coincide. Checked through the loss (mean cross-entropy
/// vs mean teacher entropy) and at distribution level, where a
/// total-variation gap must force a strictly positive KL divergence.
pub fn check_gibbs_inequality(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(211);
    let mut strict_cases = 0usize;
    for i in 0..instances {
        let k = rng.gen_range(2..=32);
        let d = rng.gen_range(2..=8);
        let b = rng.gen_range(1..=3);
        let tau_t = rng.gen_range(0.02..0.2);
        let tau_s = tau_t * rng.gen_range(1.0..3.0);
        let queue = full_queue::<f64>(&mut rng, k, d);
        let z_t = unit_rows::<f64>(&mut rng, b, d);
        let z_s = unit_rows::<f64>(&mut rng, b, d);
        let temps = TemperaturePair::new(tau_t, tau_s).map_err(|e| e.to_string())?;
        let out = relational_loss(&z_t, &z_s, &queue, &temps).map_err(|e| e.to_string())?;
        if out.loss < out.teacher_entropy - 1e-8 {
            return Err(format!(
                "instance {i}: cross-entropy {} below teacher entropy {}",
                out.loss, out.teacher_entropy
            ));
        }

        let p1 = relation_distributions(&z_t, &queue, tau_t).map_err(|e| e.to_string())?;
        let p2 = relation_distributions(&z_s, &queue, tau_s).map_err(|e| e.to_string())?;
        let h1: f64 =
            p1.rows().into_iter().map(|r| entropy(&r)).sum::<f64>() / p1.dim().0 as f64;
        let ce_self = cross_entropy_rows(&p1, &p1);
        if (ce_self - h1).abs() > 1e-10 {
            return Err(format!(
                "instance {i}: H(p,p) = {ce_self} but H(p) = {h1}; equality case broken"
            ));
        }
        let ce = cross_entropy_rows(&p1, &p2);
        if ce < h1 - 1e-8 {
            return Err(format!("instance {i}: H(p1,p2) {ce} < H(p1) {h1}"));
        }
        let tv: f64 = p1
            .iter()
            .zip(p2.iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / (2.0 * p1.dim().0 as f64);
        if tv > 1e-3 {
            strict_cases += 1;
            if ce - h1 <= 1e-7 {
                return Err(format!(
                    "instance {i}: distributions differ (TV {tv}) but KL {} is not strictly positive",
                    ce - h1
                ));
            }
        }
    }
    if strict_cases < instances / 2 {
        return Err(format!(
            "only {strict_cases}/{instances} instances exercised the strict branch"
        ));
    }
    Ok(())
}

/// Lowering the temperature strictly raises the probability mass on the
/// argmax of the similarities and never changes which entry it is.
/// Once the mass saturates at exactly 1.0 (losing tails below an ulp)
/// only non-decrease is checkable.
pub fn check_sharpening_monotonicity(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(307);
    for i in 0..instances {
        let k = rng.gen_range(2..=32);
        let mut sims: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Force a unique maximum with a workable margin.
        let am = (0..k).fold(0, |best, j| if sims[j] > sims[best] { j } else { best });
        sims[am] += 1e-3;
        let sims = ndarray::Array1::from(sims);
        let tau_hi = rng.gen_range(0.05..1.0);
        let tau_lo = tau_hi / rng.gen_range(1.2..5.0);
        let p_hi = softmax_sims(&sims.view(), tau_hi).map_err(|e| e.to_string())?;
        let p_lo = softmax_sims(&sims.view(), tau_lo).map_err(|e| e.to_string())?;
        for (name, p) in [("hi", &p_hi), ("lo", &p_lo)] {
            let pam = (0..k).fold(0, |best, j| if p[j] > p[best] { j } else { best });
            if pam != am {
                return Err(format!("instance {i}: argmax moved under tau_{name}"));
            }
        }
        if p_lo[am] < p_hi[am] {
            return Err(format!(
                "instance {i}: mass {} at tau {tau_lo} fell below {} at tau {tau_hi}",
                p_lo[am], p_hi[am]
            ));
        }
        if p_lo[am] == p_hi[am] && p_lo[am] < 1.0 {
            return Err(format!(
                "instance {i}: mass stalled at {} below saturation",
                p_lo[am]
            ));
        }
    }
    Ok(())
}

/// The ring buffer agrees with a naive double-ended list over random
/// enqueue sequences: same length, same fullness, same oldest-first rows.
pub fn check_fifo_equivalence(sequences: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    for s in 0..sequences {
        let k = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=6);
        let mut queue = MemoryQueue::<f64>::new(k, d).map_err(|e| e.to_string())?;
        let mut oracle: VecDeque<Vec<f64>> = VecDeque::new();
        for op in 0..rng.gen_range(1..=20) {
            let b = rng.gen_range(1..=k);
            let batch = unit_rows::<f64>(&mut rng, b, d);
            queue.enqueue(&batch).map_err(|e| e.to_string())?;
            for row in batch.rows() {
                oracle.push_back(row.to_vec());
                if oracle.len() > k {
                    oracle.pop_front();
                }
            }
            if queue.len() != oracle.len() {
                return Err(format!(
                    "sequence {s} op {op}: len {} vs oracle {}",
                    queue.len(),
                    oracle.len()
                ));
            }
            if queue.is_full() != (oracle.len() == k) {
                return Err(format!("sequence {s} op {op}: fullness disagrees"));
            }
            let snap = queue.snapshot_oldest_first();
            for (r, expect) in oracle.iter().enumerate() {
                let got: Vec<f64> = snap.row(r).to_vec();
                if &got != expect {
                    return Err(format!("sequence {s} op {op}: row {r} differs"));
                }
            }
        }
    }
    // Rows that are not unit length are refused outright.
    let mut queue = MemoryQueue::<f64>::new(4, 3).map_err(|e| e.to_string())?;
    let bad = Array2::from_shape_vec((1, 3), vec![0.5, 0.5, 0.5]).unwrap();
    if queue.enqueue(&bad).is_ok() {
        return Err("queue accepted a non-unit row".into());
    }
    Ok(())
}

/// Momentum-update arithmetic: m=1 freezes the teacher, m=0 copies the
/// student exactly, the blend matches `m·t + (1−m)·s`, and with the
/// student held fixed the teacher converges geometrically at rate m.
pub fn check_ema_identities() -> Result<(), String> {
    use ressl_core::model::{BackboneArch, StudentTeacherPair};
    let head = ProjectionHeadSpec {
        hidden_dim: 8,
        output_dim: 4,
    };
    let mut pair =
        StudentTeacherPair::<f64>::init(BackboneArch::Resnet18Small, head, 1.0, false, 3);
    for (i, (_, p)) in pair.trainable_params().into_iter().enumerate() {
        let delta = 1e-3 * (i as f64 + 1.0);
        p.value.mapv_inplace(|v| v + delta);
    }
    let before: Vec<(String, ArrayD<f64>)> = pair.export_tensors();
    pair.momentum = 1.0;
    ema_update(&mut pair).map_err(|e| e.to_string())?;
    let after: Vec<(String, ArrayD<f64>)> = pair.export_tensors();
    let mut any_gap = false;
    for ((name_b, tb), (name_a, ta)) in before.iter().zip(after.iter()) {
        if name_b != name_a {
            return Err("tensor order changed across export".into());
        }
        if name_b.starts_with("teacher.") && tb != ta {
            return Err(format!("m=1 moved teacher tensor {name_b}"));
        }
        if name_b.starts_with("teacher.") {
            let student_name = name_b.replacen("teacher.", "student.", 1);
            let (_, ts) = after
                .iter()
                .find(|(n, _)| n == &student_name)
                .ok_or_else(|| format!("no student twin for {name_b}"))?;
            if ta != ts {
                any_gap = true;
            }
        }
    }
    if !any_gap {
        return Err("perturbation failed: teacher already equals student".into());
    }
    pair.momentum = 0.0;
    ema_update(&mut pair).map_err(|e| e.to_string())?;
    let copied: Vec<(String, ArrayD<f64>)> = pair.export_tensors();
    for (name, t) in &copied {
        if let Some(student_name) = name.strip_prefix("teacher.") {
            let student_name = format!("student.{student_name}");
            let (_, ts) = copied
                .iter()
                .find(|(n, _)| n == &student_name)
                .ok_or_else(|| format!("no student twin for {name}"))?;
            if t != ts {
                return Err(format!("m=0 left teacher tensor {name} unequal to student"));
            }
        }
    }

    let mut t = ArrayD::<f64>::zeros(ndarray::IxDyn(&[3, 2]));
    let s = ArrayD::<f64>::ones(ndarray::IxDyn(&[3, 2]));
    ema_blend(&mut t, &s, 0.99);
    if t.iter().any(|&v| (v - 0.01).abs() > 1e-12) {
        return Err("blend of 0 toward 1 at m=0.99 is not 0.01".into());
    }

    let m = 0.9f64;
    let mut t = ArrayD::<f64>::zeros(ndarray::IxDyn(&[1]));
    for n in 1..=50 {
        ema_blend(&mut t, &s.slice(ndarray::s![..1, 0]).to_owned().into_dyn(), m);
        let residual = 1.0 - t[[0]];
        let expected = m.powi(n);
        if (residual / expected - 1.0).abs() > 1e-9 {
            return Err(format!(
                "after {n} updates residual {residual} is not m^n = {expected}"
            ));
        }
    }
    Ok(())
}

/// For unit vectors, squared distance and cosine loss are the same
/// number in different clothes: ‖p − z‖² = 2 + 2·(−p·z).
pub fn check_mse_cosine_identity(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(503);
    for i in 0..instances {
        let b = rng.gen_range(1..=4);
        let d = rng.gen_range(2..=12);
        let p = unit_rows::<f64>(&mut rng, b, d);
        let z = unit_rows::<f64>(&mut rng, b, d);
        let mse = mse_loss(&p, &z).map_err(|e| e.to_string())?.loss;
        let cos = cosine_loss(&p, &z).map_err(|e| e.to_string())?.loss;
        if (mse - (2.0 + 2.0 * cos)).abs() > 1e-6 {
            return Err(format!(
                "instance {i}: mse {mse} but 2 + 2·cos-loss = {}",
                2.0 + 2.0 * cos
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(504);
    for i in 0..instances / 4 {
        let p = unit_rows::<f32>(&mut rng, 2, 8);
        let z = unit_rows::<f32>(&mut rng, 2, 8);
        let mse = mse_loss(&p, &z).map_err(|e| e.to_string())?.loss;
        let cos = cosine_loss(&p, &z).map_err(|e| e.to_string())?.loss;
        if (mse - (2.0 + 2.0 * cos)).abs() > 1e-4 {
            return Err(format!("f32 instance {i}: identity off by more than 1e-4"));
        }
    }
    // Endpoints: aligned unit vectors, then opposed ones.
    let p = Array2::from_shape_vec((1, 2), vec![1.0f64, 0.0]).unwrap();
    let cos_same = cosine_loss(&p, &p).map_err(|e| e.to_string())?.loss;
    let mse_same = mse_loss(&p, &p).map_err(|e| e.to_string())?.loss;
    if (cos_same + 1.0).abs() > 1e-12 || mse_same.abs() > 1e-12 {
        return Err("aligned unit vectors must give cos-loss −1 and mse 0".into());
    }
    let q = p.mapv(|v| -v);
    let cos_opp = cosine_loss(&p, &q).map_err(|e| e.to_string())?.loss;
    if (cos_opp - 1.0).abs() > 1e-12 {
        return Err("opposed unit vectors must give cos-loss +1".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Toy data for end-to-end checks.
// ---------------------------------------------------------------------

/// Writes a miniature two-class packed dataset in the CIFAR-10 layout:
/// 16×16 RGB, deterministic pixels, manifests with real checksums.
pub fn write_toy_dataset(dir: &Path, train_n: u32, test_n: u32) -> NormStats {
    let stats = NormStats {
        mean: [0.5, 0.5, 0.5],
        std: [0.25, 0.25, 0.25],
    };
    std::fs::create_dir_all(dir).unwrap();
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
    stats
}

/// Small configuration matched to [`write_toy_dataset`].
pub fn toy_config(data_dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults_for(DatasetName::Cifar10, data_dir.into());
    cfg.batch_size = 4;
    cfg.bn_groups = 2;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.queue_capacity = Some(8);
    cfg.view_side = Some(16);
    cfg.head = ProjectionHeadSpec {
        hidden_dim: 32,
        output_dim: 16,
    };
    cfg
}
