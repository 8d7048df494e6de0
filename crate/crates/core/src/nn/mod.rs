//! Minimal CPU neural-network layers with explicit forward caches and
//! analytic backward passes. No autograd: each layer exposes
//! `forward`/`backward` and accumulates gradients into its [`Param`]s.

mod batchnorm;
mod conv;
mod linear;
mod ops;

pub use batchnorm::{BatchNorm2d, BnMode, BnStats};
pub use conv::Conv2d;
pub use linear::Linear;
pub use ops::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, MaxPool2d, MaxPoolCache,
};

use crate::scalar::Scalar;
use ndarray::ArrayD;

/// Trainable tensor plus its accumulated gradient.
///
/// `decay` marks whether weight decay applies; biases and batch-norm
/// affine terms opt out.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub value: ArrayD<S>,
    pub grad: ArrayD<S>,
    pub decay: bool,
}

impl<S: Scalar> Param<S> {
    #[must_use]
    pub fn new(value: ArrayD<S>, decay: bool) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.value.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named mutable references to a module's parameters, in a stable order.
pub type ParamRefs<'a, S> = Vec<(String, &'a mut Param<S>)>;

/// Named mutable references to a module's non-trainable buffers
/// (batch-norm running statistics), in a stable order.
pub type BufferRefs<'a, S> = Vec<(String, &'a mut ArrayD<S>)>;

pub(crate) fn join_name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
