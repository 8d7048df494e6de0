//! Two-layer MLP used as projection head and as the optional predictor.

use crate::error::Result;
use crate::nn::{relu, relu_backward, Linear, ParamRefs};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct TwoLayerMlp<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

pub struct MlpCache<S> {
    x: Array2<S>,
    h: Array2<S>,
}

impl<S: Scalar> TwoLayerMlp<S> {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        TwoLayerMlp {
            fc1: Linear::new(in_dim, hidden_dim, true, rng),
            fc2: Linear::new(hidden_dim, out_dim, true, rng),
        }
    }

    #[must_use]
    pub fn in_dim(&self) -> usize {
        self.fc1.in_features()
    }

    #[must_use]
    pub fn out_dim(&self) -> usize {
        self.fc2.out_features()
    }

    pub fn forward(&self, x: &Array2<S>) -> Result<Array2<S>> {
        self.fc2.forward(&relu(&self.fc1.forward(x)?))
    }

    pub fn forward_train(&self, x: Array2<S>) -> Result<(Array2<S>, MlpCache<S>)> {
        let h = relu(&self.fc1.forward(&x)?);
        let y = self.fc2.forward(&h)?;
        Ok((y, MlpCache { x, h }))
    }

    pub fn backward(
        &mut self,
        cache: &MlpCache<S>,
        dy: &Array2<S>,
        need_dx: bool,
    ) -> Result<Option<Array2<S>>> {
        let dh = self
            .fc2
            .backward(&cache.h, dy, true)?
            .expect("dx requested");
        let dh = relu_backward(&cache.h, &dh);
        self.fc1.backward(&cache.x, &dh, need_dx)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a, S>) {
        self.fc1.collect_params(&format!("{prefix}fc1"), out);
        self.fc2.collect_params(&format!("{prefix}fc2"), out);
    }
}
