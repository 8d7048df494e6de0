//! Fully connected layer.

use super::{join_name, Param, ParamRefs};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Ix2};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear<S> {
    /// [out_features, in_features]
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    in_features: usize,
    out_features: usize,
}

impl<S: Scalar> Linear<S> {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weight and bias.
    pub fn new(in_features: usize, out_features: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = (in_features as f64).sqrt().recip();
        let weight = Array2::from_shape_fn((out_features, in_features), |_| {
            S::cast(rng.gen_range(-bound..bound))
        })
        .into_dyn();
        let bias = bias.then(|| {
            Param::new(
                Array1::from_shape_fn(out_features, |_| S::cast(rng.gen_range(-bound..bound)))
                    .into_dyn(),
                false,
            )
        });
        Linear {
            weight: Param::new(weight, true),
            bias,
            in_features,
            out_features,
        }
    }

    #[must_use]
    pub fn in_features(&self) -> usize {
        self.in_features
    }

    #[must_use]
    pub fn out_features(&self) -> usize {
        self.out_features
    }

    /// `x`: [B, in] -> [B, out].
    pub fn forward(&self, x: &Array2<S>) -> Result<Array2<S>> {
        if x.dim().1 != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects {} input features, got {}",
                self.in_features,
                x.dim().1
            )));
        }
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight rank 2");
        let mut y = x.dot(&w.t());
        if let Some(b) = &self.bias {
            for mut row in y.rows_mut() {
                for (v, bv) in row.iter_mut().zip(b.value.iter()) {
                    *v += *bv;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates gradients; returns dL/dx when `need_dx`.
    pub fn backward(
        &mut self,
        x: &Array2<S>,
        dy: &Array2<S>,
        need_dx: bool,
    ) -> Result<Option<Array2<S>>> {
        if dy.dim() != (x.dim().0, self.out_features) {
            return Err(Error::Shape("linear backward shapes disagree".to_string()));
        }
        let dw = dy.t().dot(x);
        self.weight.grad = &self.weight.grad + &dw.into_dyn();
        if let Some(b) = &mut self.bias {
            let db = dy.sum_axis(ndarray::Axis(0));
            b.grad = &b.grad + &db.into_dyn();
        }
        if need_dx {
            let w = self
                .weight
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .expect("linear weight rank 2");
            Ok(Some(dy.dot(&w)))
        } else {
            Ok(None)
        }
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a, S>) {
        out.push((join_name(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join_name(prefix, "bias"), b));
        }
    }
}
