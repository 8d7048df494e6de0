//! Student/teacher encoder pair: backbone, projection head, optional
//! predictor, and embedding utilities.

mod head;
mod resnet;

pub use head::{MlpCache, TwoLayerMlp};
pub use resnet::{BackboneArch, ResNet, ResNetCache};

use crate::error::{Error, Result};
use crate::nn::{BnMode, BufferRefs, ParamRefs};
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionHeadSpec {
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for ProjectionHeadSpec {
    fn default() -> Self {
        ProjectionHeadSpec {
            hidden_dim: 512,
            output_dim: 128,
        }
    }
}

/// Batch of projection embeddings: [B, D] plus a normalization marker.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch<S> {
    pub vectors: Array2<S>,
    pub normalized: bool,
}

impl<S: Scalar> EmbeddingBatch<S> {
    #[must_use]
    pub fn new(vectors: Array2<S>) -> Self {
        EmbeddingBatch {
            vectors,
            normalized: false,
        }
    }

    /// Rows scaled to unit L2 norm. Errors on a (numerically) zero row.
    pub fn l2_normalize(&self) -> Result<EmbeddingBatch<S>> {
        let (z, _) = l2_normalize_with_norms(&self.vectors)?;
        Ok(EmbeddingBatch {
            vectors: z,
            normalized: true,
        })
    }
}

/// Row-normalize, returning the original norms for use in backward passes.
pub fn l2_normalize_with_norms<S: Scalar>(v: &Array2<S>) -> Result<(Array2<S>, Array1<S>)> {
    let (b, _) = v.dim();
    let mut out = v.clone();
    let mut norms = Array1::<S>::zeros(b);
    let tiny = S::cast(1e-12);
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|x| *x * *x).sum::<S>().sqrt();
        if n <= tiny || !n.is_finite() {
            return Err(Error::Numeric(format!(
                "cannot normalize embedding row {i}: norm {n}"
            )));
        }
        norms[i] = n;
        row.mapv_inplace(|x| x / n);
    }
    Ok((out, norms))
}

/// dL/dv for z = v / ||v||, given normalized rows `z`, their original
/// `norms`, and dL/dz. Per row: (dz - z (z . dz)) / ||v||.
#[must_use]
pub fn l2_normalize_backward<S: Scalar>(
    z: &Array2<S>,
    norms: &Array1<S>,
    dz: &Array2<S>,
) -> Array2<S> {
    let (b, d) = z.dim();
    let mut dv = Array2::<S>::zeros((b, d));
    for i in 0..b {
        let zi = z.row(i);
        let gi = dz.row(i);
        let dot = zi.dot(&gi);
        let inv_n = norms[i].recip();
        for j in 0..d {
            dv[[i, j]] = (gi[j] - zi[j] * dot) * inv_n;
        }
    }
    dv
}

/// Backbone plus projection head.
#[derive(Debug, Clone)]
pub struct EncoderNet<S> {
    pub backbone: ResNet<S>,
    pub head: TwoLayerMlp<S>,
}

pub struct EncoderCache<S> {
    backbone: ResNetCache<S>,
    head: MlpCache<S>,
}

impl<S: Scalar> EncoderNet<S> {
    pub fn new(arch: BackboneArch, head_spec: ProjectionHeadSpec, rng: &mut impl rand::Rng) -> Self {
        let backbone = ResNet::new(arch, rng);
        let head = TwoLayerMlp::new(
            arch.feature_dim(),
            head_spec.hidden_dim,
            head_spec.output_dim,
            rng,
        );
        EncoderNet { backbone, head }
    }

    /// Projection embeddings (unnormalized) for a batch of views.
    ///
    /// `bn_groups > 1` normalizes with statistics of contiguous batch
    /// groups; the batch size must divide evenly.
    pub fn forward_embed(
        &mut self,
        views: &Array4<S>,
        bn_groups: usize,
    ) -> Result<EmbeddingBatch<S>> {
        let b = views.dim().0;
        if bn_groups == 0 || b % bn_groups != 0 {
            return Err(Error::Shape(format!(
                "batch size {b} not divisible by bn_groups {bn_groups}"
            )));
        }
        let feat = self
            .backbone
            .forward(views, BnMode::Train { groups: bn_groups })?;
        let z = self.head.forward(&feat)?;
        Ok(EmbeddingBatch::new(z))
    }

    /// Inference embeddings using running batch-norm statistics.
    pub fn forward_embed_eval(&mut self, views: &Array4<S>) -> Result<EmbeddingBatch<S>> {
        let feat = self.backbone.forward(views, BnMode::Eval)?;
        let z = self.head.forward(&feat)?;
        Ok(EmbeddingBatch::new(z))
    }

    /// Training forward with caches; single-group batch statistics.
    pub fn forward_embed_train(
        &mut self,
        views: Array4<S>,
    ) -> Result<(EmbeddingBatch<S>, EncoderCache<S>)> {
        let (feat, bc) = self.backbone.forward_train(views)?;
        let (z, hc) = self.head.forward_train(feat)?;
        Ok((
            EmbeddingBatch::new(z),
            EncoderCache {
                backbone: bc,
                head: hc,
            },
        ))
    }

    /// Accumulates gradients from dL/d(embedding).
    pub fn backward(&mut self, cache: &EncoderCache<S>, dz: &Array2<S>) -> Result<()> {
        let dfeat = self
            .head
            .backward(&cache.head, dz, true)?
            .expect("dx requested");
        self.backbone.backward(&cache.backbone, &dfeat)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a, S>) {
        self.backbone
            .collect_params(&format!("{prefix}backbone."), out);
        self.head.collect_params(&format!("{prefix}head."), out);
    }

    pub fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut BufferRefs<'a, S>) {
        self.backbone
            .collect_buffers(&format!("{prefix}backbone."), out);
    }

    pub fn zero_grads(&mut self) {
        let mut params = Vec::new();
        self.collect_params("", &mut params);
        for (_, p) in params {
            p.zero_grad();
        }
    }
}

/// Student optimized by gradient descent; teacher tracked as an
/// exponential moving average of the student. The optional predictor
/// belongs to the student side only.
pub struct StudentTeacherPair<S> {
    pub student: EncoderNet<S>,
    pub teacher: EncoderNet<S>,
    pub predictor: Option<TwoLayerMlp<S>>,
    pub momentum: S,
}

impl<S: Scalar> StudentTeacherPair<S> {
    /// Builds student and teacher with identical initial weights.
    pub fn init(
        arch: BackboneArch,
        head_spec: ProjectionHeadSpec,
        momentum: S,
        with_predictor: bool,
        seed: u64,
    ) -> Self {
        let mut rng = derive_rng(seed, "model-init", &[]);
        let student = EncoderNet::new(arch, head_spec, &mut rng);
        let predictor = with_predictor.then(|| {
            TwoLayerMlp::new(
                head_spec.output_dim,
                head_spec.hidden_dim,
                head_spec.output_dim,
                &mut rng,
            )
        });
        let teacher = student.clone();
        StudentTeacherPair {
            student,
            teacher,
            predictor,
            momentum,
        }
    }

    /// Parameters the optimizer updates: student net plus predictor.
    pub fn trainable_params<'a>(&'a mut self) -> ParamRefs<'a, S> {
        let mut out = Vec::new();
        self.student.collect_params("student.", &mut out);
        if let Some(p) = &mut self.predictor {
            p.collect_params("predictor.", &mut out);
        }
        out
    }

    /// Snapshot of all parameters and buffers for checkpointing, in a
    /// stable order: student params, predictor params, teacher params,
    /// then student and teacher buffers.
    pub fn export_tensors(&mut self) -> Vec<(String, ndarray::ArrayD<S>)> {
        let mut out = Vec::new();
        {
            let mut params = Vec::new();
            self.student.collect_params("student.", &mut params);
            if let Some(p) = &mut self.predictor {
                p.collect_params("predictor.", &mut params);
            }
            self.teacher.collect_params("teacher.", &mut params);
            for (name, p) in params {
                out.push((name, p.value.clone()));
            }
        }
        let mut buffers = Vec::new();
        self.student.collect_buffers("student.", &mut buffers);
        self.teacher.collect_buffers("teacher.", &mut buffers);
        for (name, b) in buffers {
            out.push((name, b.clone()));
        }
        out
    }

    /// Restores a snapshot produced by [`StudentTeacherPair::export_tensors`]
    /// on a pair with the same architecture. Every tensor must be present
    /// with a matching shape, and no extras are allowed.
    pub fn import_tensors(
        &mut self,
        tensors: &std::collections::HashMap<String, ndarray::ArrayD<S>>,
    ) -> Result<()> {
        let mut consumed = 0usize;
        {
            let mut params = Vec::new();
            self.student.collect_params("student.", &mut params);
            if let Some(p) = &mut self.predictor {
                p.collect_params("predictor.", &mut params);
            }
            self.teacher.collect_params("teacher.", &mut params);
            for (name, p) in params {
                let src = tensors.get(&name).ok_or_else(|| {
                    Error::Checkpoint(format!("missing tensor {name}"))
                })?;
                if src.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        p.value.shape()
                    )));
                }
                p.value.assign(src);
                consumed += 1;
            }
        }
        let mut buffers = Vec::new();
        self.student.collect_buffers("student.", &mut buffers);
        self.teacher.collect_buffers("teacher.", &mut buffers);
        for (name, b) in buffers {
            let src = tensors.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor {name}"))
            })?;
            if src.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    b.shape()
                )));
            }
            b.assign(src);
            consumed += 1;
        }
        if consumed != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but the model consumes {consumed}",
                tensors.len()
            )));
        }
        Ok(())
    }
}
