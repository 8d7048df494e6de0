//! Stochastic gradient descent with classical momentum and selective
//! weight decay (parameters opt out via their `decay` flag — biases and
//! normalization affines).

use crate::error::{Error, Result};
use crate::nn::ParamRefs;
use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::collections::HashMap;

/// Velocity update: v ← m·v + (g + wd·p); parameter update: p ← p − lr·v.
pub struct SgdMomentum<S> {
    momentum: S,
    weight_decay: S,
    velocity: HashMap<String, ArrayD<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    #[must_use]
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum: S::cast(momentum),
            weight_decay: S::cast(weight_decay),
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to every parameter at learning rate `lr`.
    /// Velocity buffers are keyed by parameter name and created lazily.
    pub fn step(&mut self, params: &mut ParamRefs<'_, S>, lr: S) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let mut g = p.grad.clone();
            if p.decay {
                g.zip_mut_with(&p.value, |gi, &vi| *gi += self.weight_decay * vi);
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            if v.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "velocity for {name} has shape {:?}, gradient {:?}",
                    v.shape(),
                    g.shape()
                )));
            }
            v.zip_mut_with(&g, |vi, &gi| *vi = self.momentum * *vi + gi);
            p.value.zip_mut_with(v, |pi, &vi| *pi -= lr * vi);
        }
        Ok(())
    }

    /// Named velocity buffers for checkpointing (sorted by name).
    #[must_use]
    pub fn export_state(&self) -> Vec<(String, ArrayD<S>)> {
        let mut out: Vec<(String, ArrayD<S>)> = self
            .velocity
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn import_state(&mut self, state: Vec<(String, ArrayD<S>)>) {
        self.velocity = state.into_iter().collect();
    }
}
