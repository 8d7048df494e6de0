//! Relational objective: the student is trained to reproduce the
//! teacher's similarity distribution over a queue of past teacher
//! embeddings, with the teacher distribution sharpened by a lower
//! temperature. Also provides the instance-discrimination and
//! predictor-regression objectives used as baselines, and the momentum
//! update that derives the teacher from the student.

use crate::error::{Error, Result};
use crate::model::StudentTeacherPair;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD, ArrayView1, Axis};

/// Teacher/student softmax temperatures. The teacher must be at least as
/// sharp (no larger) than the student; matching temperatures are legal but
/// remove the sharpening signal, so a warning is logged when the teacher
/// is not clearly sharper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperaturePair<S> {
    teacher: S,
    student: S,
}

impl<S: Scalar> TemperaturePair<S> {
    pub fn new(teacher: S, student: S) -> Result<Self> {
        if teacher <= S::zero() || !teacher.is_finite() {
            return Err(Error::Config(format!(
                "teacher temperature must be positive, got {teacher}"
            )));
        }
        if student <= S::zero() || !student.is_finite() {
            return Err(Error::Config(format!(
                "student temperature must be positive, got {student}"
            )));
        }
        if teacher > student {
            return Err(Error::Config(format!(
                "teacher temperature {teacher} must not exceed student temperature {student}"
            )));
        }
        if teacher > S::cast(0.5) * student {
            log::warn!(
                "teacher temperature {teacher} is more than half the student temperature \
                 {student}; the sharpening signal will be weak"
            );
        }
        Ok(TemperaturePair { teacher, student })
    }

    #[must_use]
    pub fn teacher(&self) -> S {
        self.teacher
    }

    #[must_use]
    pub fn student(&self) -> S {
        self.student
    }
}

/// Fixed-capacity FIFO of unit-norm embeddings, stored as a ring.
#[derive(Debug, Clone)]
pub struct MemoryQueue<S> {
    buf: Array2<S>,
    cursor: usize,
    filled: usize,
}

/// Max tolerated deviation of a stored row's norm from 1.
pub const QUEUE_NORM_TOL: f64 = 1e-5;

impl<S: Scalar> MemoryQueue<S> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "queue needs positive capacity and dim, got {capacity}x{dim}"
            )));
        }
        Ok(MemoryQueue {
            buf: Array2::zeros((capacity, dim)),
            cursor: 0,
            filled: 0,
        })
    }

    #[must_use]
    pub fn capacity(&self) -> usize {
        self.buf.dim().0
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.buf.dim().1
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.filled
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    #[must_use]
    pub fn is_full(&self) -> bool {
        self.filled == self.capacity()
    }

    #[must_use]
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Appends rows, evicting the oldest entries once full. Rows must be
    /// unit-norm within [`QUEUE_NORM_TOL`].
    pub fn enqueue(&mut self, batch: &Array2<S>) -> Result<()> {
        if batch.dim().1 != self.dim() {
            return Err(Error::Shape(format!(
                "queue dim {} but batch dim {}",
                self.dim(),
                batch.dim().1
            )));
        }
        let tol = S::cast(QUEUE_NORM_TOL);
        for (i, row) in batch.rows().into_iter().enumerate() {
            let norm = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
            if (norm - S::one()).abs() > tol {
                return Err(Error::Numeric(format!(
                    "queue rows must be unit-norm; batch row {i} has norm {norm}"
                )));
            }
        }
        let cap = self.capacity();
        for row in batch.rows() {
            self.buf.row_mut(self.cursor).assign(&row);
            self.cursor = (self.cursor + 1) % cap;
            if self.filled < cap {
                self.filled += 1;
            }
        }
        Ok(())
    }

    /// Ring-order storage. Row order is arbitrary but consistent between
    /// calls, which is all the similarity computations need.
    #[must_use]
    pub fn as_matrix(&self) -> &Array2<S> {
        &self.buf
    }

    /// Entries ordered oldest to newest.
    #[must_use]
    pub fn snapshot_oldest_first(&self) -> Array2<S> {
        let cap = self.capacity();
        let mut out = Array2::zeros((self.filled, self.dim()));
        let start = (self.cursor + cap - self.filled) % cap;
        for k in 0..self.filled {
            out.row_mut(k).assign(&self.buf.row((start + k) % cap));
        }
        out
    }

    /// Rebuilds a queue from serialized storage.
    pub fn from_parts(buf: Array2<S>, cursor: usize, filled: usize) -> Result<Self> {
        let cap = buf.dim().0;
        if cursor >= cap.max(1) || filled > cap {
            return Err(Error::Checkpoint(format!(
                "queue cursor {cursor} / filled {filled} out of range for capacity {cap}"
            )));
        }
        Ok(MemoryQueue {
            buf,
            cursor,
            filled,
        })
    }
}

/// Softmax of `sims / tau`, computed with max subtraction.
pub fn softmax_sims<S: Scalar>(sims: &ArrayView1<S>, tau: S) -> Result<Array1<S>> {
    if tau <= S::zero() || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut max = S::neg_infinity();
    for &v in sims.iter() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite similarity {v}")));
        }
        if v > max {
            max = v;
        }
    }
    let mut out = Array1::<S>::zeros(sims.len());
    let mut denom = S::zero();
    for (o, &v) in out.iter_mut().zip(sims.iter()) {
        let e = ((v - max) / tau).exp();
        *o = e;
        denom += e;
    }
    out.mapv_inplace(|v| v / denom);
    Ok(out)
}

/// Probability vector over the queue entries at a given temperature.
#[derive(Debug, Clone)]
pub struct RelationDistribution<S> {
    pub probs: Array1<S>,
    pub temperature: S,
}

/// Distribution of similarities between one embedding and every queue
/// entry. The queue must be full so every distribution shares the same
/// support.
pub fn relation_distribution<S: Scalar>(
    z: &ArrayView1<S>,
    queue: &MemoryQueue<S>,
    tau: S,
) -> Result<RelationDistribution<S>> {
    if z.len() != queue.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} but queue dim {}",
            z.len(),
            queue.dim()
        )));
    }
    if !queue.is_full() {
        return Err(Error::Numeric(format!(
            "relation distribution needs a full queue ({}/{} filled)",
            queue.len(),
            queue.capacity()
        )));
    }
    let sims = queue.as_matrix().dot(z);
    let probs = softmax_sims(&sims.view(), tau)?;
    Ok(RelationDistribution {
        probs,
        temperature: tau,
    })
}

/// Row-wise relation distributions for a batch: [B, K].
pub fn relation_distributions<S: Scalar>(
    z: &Array2<S>,
    queue: &MemoryQueue<S>,
    tau: S,
) -> Result<Array2<S>> {
    if z.dim().1 != queue.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} but queue dim {}",
            z.dim().1,
            queue.dim()
        )));
    }
    if !queue.is_full() {
        return Err(Error::Numeric(format!(
            "relation distribution needs a full queue ({}/{} filled)",
            queue.len(),
            queue.capacity()
        )));
    }
    let sims = z.dot(&queue.as_matrix().t());
    let mut probs = Array2::<S>::zeros(sims.raw_dim());
    for (mut out_row, sim_row) in probs.rows_mut().into_iter().zip(sims.rows()) {
        out_row.assign(&softmax_sims(&sim_row, tau)?);
    }
    Ok(probs)
}

/// Shannon entropy in nats; zero probabilities contribute nothing.
pub fn entropy<S: Scalar>(probs: &ArrayView1<S>) -> S {
    let mut h = S::zero();
    for &p in probs.iter() {
        if p > S::zero() {
            h -= p * p.ln();
        }
    }
    h
}

/// Result of the relational objective on one batch.
#[derive(Debug, Clone)]
pub struct RelationalLoss<S> {
    /// Mean cross-entropy between teacher and student distributions.
    pub loss: S,
    /// dL/d(student embeddings), same shape as the student input.
    pub grad_student: Array2<S>,
    /// Mean entropy of the teacher distributions, in nats.
    pub teacher_entropy: S,
    /// Mean of the per-sample max teacher probability.
    pub teacher_max_prob: S,
}

/// Cross-entropy H(p_teacher, p_student) between queue-similarity
/// distributions, averaged over the batch. Only the student side carries
/// a gradient; the teacher distribution is a constant target.
///
/// Inputs are expected to be L2-normalized rows (the distributions are
/// well defined either way, so finite-difference probes of the gradient
/// need not re-normalize).
pub fn relational_loss<S: Scalar>(
    z_teacher: &Array2<S>,
    z_student: &Array2<S>,
    queue: &MemoryQueue<S>,
    temps: &TemperaturePair<S>,
) -> Result<RelationalLoss<S>> {
    if z_teacher.dim() != z_student.dim() {
        return Err(Error::Shape(format!(
            "teacher batch {:?} but student batch {:?}",
            z_teacher.dim(),
            z_student.dim()
        )));
    }
    let b = z_teacher.dim().0;
    if b == 0 {
        return Err(Error::Shape("empty batch".to_string()));
    }
    let p_teacher = relation_distributions(z_teacher, queue, temps.teacher())?;
    let (loss, grad_student, _) = student_cross_entropy(&p_teacher, z_student, queue, temps.student())?;
    let b_s = S::cast_usize(b);
    let mut h_sum = S::zero();
    let mut max_sum = S::zero();
    for row in p_teacher.rows() {
        h_sum += entropy(&row);
        max_sum += row.iter().fold(S::zero(), |m, &v| m.max(v));
    }
    Ok(RelationalLoss {
        loss,
        grad_student,
        teacher_entropy: h_sum / b_s,
        teacher_max_prob: max_sum / b_s,
    })
}

/// Shared core: cross-entropy of the student distribution against fixed
/// targets, in log space, with the analytic student gradient.
fn student_cross_entropy<S: Scalar>(
    targets: &Array2<S>,
    z_student: &Array2<S>,
    queue: &MemoryQueue<S>,
    tau_s: S,
) -> Result<(S, Array2<S>, Array2<S>)> {
    let b = z_student.dim().0;
    let b_s = S::cast_usize(b);
    let sims = z_student.dot(&queue.as_matrix().t());
    let mut p_student = Array2::<S>::zeros(sims.raw_dim());
    let mut loss = S::zero();
    for ((t_row, sim_row), mut ps_row) in targets
        .rows()
        .into_iter()
        .zip(sims.rows())
        .zip(p_student.rows_mut())
    {
        // log softmax with max subtraction; cross-entropy accumulated in
        // log space so sharp targets cannot underflow to -inf through exp.
        let max = sim_row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut denom = S::zero();
        for &v in sim_row.iter() {
            denom += ((v - max) / tau_s).exp();
        }
        let log_denom = denom.ln();
        let mut ce = S::zero();
        for ((&t, &v), ps) in t_row.iter().zip(sim_row.iter()).zip(ps_row.iter_mut()) {
            let logp = (v - max) / tau_s - log_denom;
            *ps = logp.exp();
            if t > S::zero() {
                ce -= t * logp;
            }
        }
        loss += ce;
    }
    loss /= b_s;
    // dL/dz_s = (p_student - target) Q / (B * tau_s)
    let diff = &p_student - targets;
    let scale = (b_s * tau_s).recip();
    let grad = diff.dot(queue.as_matrix()) * scale;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite relational loss {loss}")));
    }
    Ok((loss, grad, p_student))
}

/// Relational loss aggregated over several student crops against one
/// teacher view: the per-crop losses are averaged.
pub fn relational_loss_multicrop<S: Scalar>(
    z_teacher: &Array2<S>,
    z_student_crops: &[Array2<S>],
    queue: &MemoryQueue<S>,
    temps: &TemperaturePair<S>,
) -> Result<(S, Vec<Array2<S>>, S)> {
    if z_student_crops.is_empty() {
        return Err(Error::Shape("no student crops".to_string()));
    }
    let n = S::cast_usize(z_student_crops.len());
    let mut total = S::zero();
    let mut grads = Vec::with_capacity(z_student_crops.len());
    let mut teacher_entropy = S::zero();
    for crop in z_student_crops {
        let out = relational_loss(z_teacher, crop, queue, temps)?;
        total += out.loss / n;
        grads.push(out.grad_student / n);
        teacher_entropy = out.teacher_entropy;
    }
    Ok((total, grads, teacher_entropy))
}

/// Instance-discrimination objective against the queue as negatives.
#[derive(Debug, Clone)]
pub struct InfoNceLoss<S> {
    pub loss: S,
    pub grad_query: Array2<S>,
}

/// -log( exp(q.k/tau) / (exp(q.k/tau) + sum_j exp(q.Q_j/tau)) ), averaged
/// over the batch. Gradient flows into the query side only.
pub fn info_nce_loss<S: Scalar>(
    query: &Array2<S>,
    key: &Array2<S>,
    queue: &MemoryQueue<S>,
    tau: S,
) -> Result<InfoNceLoss<S>> {
    if query.dim() != key.dim() {
        return Err(Error::Shape(format!(
            "query batch {:?} but key batch {:?}",
            query.dim(),
            key.dim()
        )));
    }
    if tau <= S::zero() || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if !queue.is_full() {
        return Err(Error::Numeric(format!(
            "negatives need a full queue ({}/{} filled)",
            queue.len(),
            queue.capacity()
        )));
    }
    let (b, d) = query.dim();
    if d != queue.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {d} but queue dim {}",
            queue.dim()
        )));
    }
    let b_s = S::cast_usize(b);
    let k = queue.capacity();
    let neg_sims = query.dot(&queue.as_matrix().t());
    let mut loss = S::zero();
    let mut grad = Array2::<S>::zeros((b, d));
    for i in 0..b {
        let pos = query.row(i).dot(&key.row(i));
        let mut max = pos;
        for &v in neg_sims.row(i).iter() {
            if v > max {
                max = v;
            }
        }
        let e_pos = ((pos - max) / tau).exp();
        let mut denom = e_pos;
        for &v in neg_sims.row(i).iter() {
            denom += ((v - max) / tau).exp();
        }
        loss += -(e_pos / denom).ln();
        // dL/dq = ((p0 - 1) k + sum_j p_j Q_j) / tau, p over [pos, negs].
        let p0 = e_pos / denom;
        let coef = (p0 - S::one()) / (tau * b_s);
        for j in 0..d {
            grad[[i, j]] += coef * key.row(i)[j];
        }
        for nk in 0..k {
            let p = ((neg_sims[[i, nk]] - max) / tau).exp() / denom;
            let c = p / (tau * b_s);
            for j in 0..d {
                grad[[i, j]] += c * queue.as_matrix()[[nk, j]];
            }
        }
    }
    loss /= b_s;
    Ok(InfoNceLoss {
        loss,
        grad_query: grad,
    })
}

/// Negative cosine similarity between predictions and targets, averaged
/// over the batch; gradient flows into the prediction side only.
#[derive(Debug, Clone)]
pub struct RegressionLoss<S> {
    pub loss: S,
    pub grad_pred: Array2<S>,
}

pub fn cosine_loss<S: Scalar>(pred: &Array2<S>, target: &Array2<S>) -> Result<RegressionLoss<S>> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape("cosine loss shapes disagree".to_string()));
    }
    let b = pred.dim().0;
    let b_s = S::cast_usize(b);
    let (p_hat, p_norms) = crate::model::l2_normalize_with_norms(pred)?;
    let (t_hat, _) = crate::model::l2_normalize_with_norms(target)?;
    let mut loss = S::zero();
    for i in 0..b {
        loss -= p_hat.row(i).dot(&t_hat.row(i));
    }
    loss /= b_s;
    // dL/d p_hat = -t_hat / B, then back through the normalization.
    let d_phat = t_hat.mapv(|v| -v / b_s);
    let grad = crate::model::l2_normalize_backward(&p_hat, &p_norms, &d_phat);
    Ok(RegressionLoss {
        loss,
        grad_pred: grad,
    })
}

/// Mean squared L2 distance per sample; gradient on the prediction side.
pub fn mse_loss<S: Scalar>(pred: &Array2<S>, target: &Array2<S>) -> Result<RegressionLoss<S>> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape("mse loss shapes disagree".to_string()));
    }
    let b_s = S::cast_usize(pred.dim().0);
    let diff = pred - target;
    let loss = diff.iter().map(|v| *v * *v).sum::<S>() / b_s;
    let grad = diff.mapv(|v| S::cast(2.0) * v / b_s);
    Ok(RegressionLoss {
        loss,
        grad_pred: grad,
    })
}

/// In-place exponential moving average: target = m*target + (1-m)*source.
pub fn ema_blend<S: Scalar>(target: &mut ArrayD<S>, source: &ArrayD<S>, m: S) {
    target.zip_mut_with(source, |t, &s| {
        *t = m * *t + (S::one() - m) * s;
    });
}

/// Momentum update of the teacher encoder toward the student encoder.
/// The predictor (when present) is not mirrored.
pub fn ema_update<S: Scalar>(pair: &mut StudentTeacherPair<S>) -> Result<()> {
    let m = pair.momentum;
    if !(m >= S::zero() && m <= S::one()) {
        return Err(Error::Config(format!(
            "momentum must lie in [0, 1], got {m}"
        )));
    }
    let (student, teacher) = (&mut pair.student, &mut pair.teacher);
    let mut sp = Vec::new();
    student.collect_params("", &mut sp);
    let mut tp = Vec::new();
    teacher.collect_params("", &mut tp);
    debug_assert_eq!(sp.len(), tp.len());
    for ((sn, s), (tn, t)) in sp.iter().zip(tp.iter_mut()) {
        debug_assert_eq!(sn, tn);
        ema_blend(&mut t.value, &s.value, m);
    }
    Ok(())
}

/// Mean entropy of distribution rows, in nats.
pub fn mean_entropy<S: Scalar>(probs: &Array2<S>) -> S {
    let b = probs.dim().0;
    if b == 0 {
        return S::zero();
    }
    probs
        .axis_iter(Axis(0))
        .map(|row| entropy(&row))
        .sum::<S>()
        / S::cast_usize(b)
}
