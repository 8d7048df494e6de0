//! Batch normalization over [B, C, H, W] with optional grouped statistics.
//!
//! Grouped mode splits the batch into contiguous groups and normalizes each
//! with its own statistics, approximating the cross-device statistic
//! shuffling used by momentum-teacher methods on a single process. The
//! backward pass supports single-group mode only, which is the only mode
//! gradients flow through (the grouped path runs on the gradient-free
//! teacher).

use super::{join_name, BufferRefs, Param, ParamRefs};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array4, ArrayD, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, running buffers updated. `groups` must divide B.
    Train { groups: usize },
    /// Running statistics, buffers untouched.
    Eval,
}

/// Per-channel statistics cached by a training forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BnStats<S> {
    pub mean: Array1<S>,
    pub inv_std: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: ArrayD<S>,
    pub running_var: ArrayD<S>,
    pub momentum: S,
    pub eps: S,
    channels: usize,
}

impl<S: Scalar> BatchNorm2d<S> {
    #[must_use]
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::from_elem(ndarray::IxDyn(&[channels]), S::one()), false),
            beta: Param::new(ArrayD::zeros(ndarray::IxDyn(&[channels])), false),
            running_mean: ArrayD::zeros(ndarray::IxDyn(&[channels])),
            running_var: ArrayD::from_elem(ndarray::IxDyn(&[channels]), S::one()),
            momentum: S::cast(0.1),
            eps: S::cast(1e-5),
            channels,
        }
    }

    fn check_input(&self, x: &Array4<S>) -> Result<()> {
        if x.dim().1 != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm expects {} channels, got {}",
                self.channels,
                x.dim().1
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Array4<S>, mode: BnMode) -> Result<Array4<S>> {
        match mode {
            BnMode::Eval => self.forward_eval(x),
            BnMode::Train { groups } => self.forward_train(x, groups).map(|(y, _)| y),
        }
    }

    fn forward_eval(&self, x: &Array4<S>) -> Result<Array4<S>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for c in 0..self.channels {
            let mean = self.running_mean[[c]];
            let inv = (self.running_var[[c]] + self.eps).sqrt().recip();
            let g = self.gamma.value[[c]];
            let b = self.beta.value[[c]];
            for v in y.index_axis_mut(Axis(1), c).iter_mut() {
                *v = (*v - mean) * inv * g + b;
            }
        }
        Ok(y)
    }

    /// Training forward. Returns the cached statistics of the final group
    /// layout; callers that need a backward pass must use `groups == 1`.
    pub fn forward_train(&mut self, x: &Array4<S>, groups: usize) -> Result<(Array4<S>, BnStats<S>)> {
        self.check_input(x)?;
        let (b, _, h, w) = x.dim();
        if groups == 0 || b % groups != 0 {
            return Err(Error::Shape(format!(
                "batch size {b} not divisible into {groups} groups"
            )));
        }
        let gb = b / groups;
        let n = gb * h * w;
        if n < 2 {
            return Err(Error::Shape(format!(
                "batchnorm needs at least 2 elements per channel per group, got {n}"
            )));
        }
        let mut y = x.clone();
        let mut mean_acc = Array1::<S>::zeros(self.channels);
        let mut var_acc = Array1::<S>::zeros(self.channels);
        // Stats of the last group are cached; with groups == 1 that is the
        // whole batch, which is the only case backward consumes.
        let mut last_stats = BnStats {
            mean: Array1::zeros(self.channels),
            inv_std: Array1::zeros(self.channels),
        };
        let n_s = S::cast_usize(n);
        for g in 0..groups {
            let lo = g * gb;
            let hi = lo + gb;
            for c in 0..self.channels {
                let mut sum = S::zero();
                let mut sumsq = S::zero();
                for bi in lo..hi {
                    for yy in 0..h {
                        for xx in 0..w {
                            let v = x[[bi, c, yy, xx]];
                            sum += v;
                            sumsq += v * v;
                        }
                    }
                }
                let mean = sum / n_s;
                let var = (sumsq / n_s - mean * mean).max(S::zero());
                let inv = (var + self.eps).sqrt().recip();
                let gam = self.gamma.value[[c]];
                let bet = self.beta.value[[c]];
                for bi in lo..hi {
                    for yy in 0..h {
                        for xx in 0..w {
                            y[[bi, c, yy, xx]] = (x[[bi, c, yy, xx]] - mean) * inv * gam + bet;
                        }
                    }
                }
                mean_acc[c] += mean;
                // Unbiased variance feeds the running buffer, matching the
                // usual training-framework convention.
                let unbiased = var * n_s / S::cast_usize(n - 1);
                var_acc[c] += unbiased;
                last_stats.mean[c] = mean;
                last_stats.inv_std[c] = inv;
            }
        }
        let g_s = S::cast_usize(groups);
        let m = self.momentum;
        for c in 0..self.channels {
            self.running_mean[[c]] = (S::one() - m) * self.running_mean[[c]] + m * mean_acc[c] / g_s;
            self.running_var[[c]] = (S::one() - m) * self.running_var[[c]] + m * var_acc[c] / g_s;
        }
        Ok((y, last_stats))
    }

    /// Backward for a `groups == 1` training forward on input `x` with the
    /// stats it returned. Accumulates gamma/beta gradients, returns dL/dx.
    pub fn backward(&mut self, x: &Array4<S>, stats: &BnStats<S>, dy: &Array4<S>) -> Result<Array4<S>> {
        self.check_input(x)?;
        if dy.dim() != x.dim() {
            return Err(Error::Shape(
                "batchnorm backward shapes disagree".to_string(),
            ));
        }
        let (b, _, h, w) = x.dim();
        let n = S::cast_usize(b * h * w);
        let mut dx = Array4::<S>::zeros(x.raw_dim());
        for c in 0..self.channels {
            let mean = stats.mean[c];
            let inv = stats.inv_std[c];
            let gam = self.gamma.value[[c]];
            let mut sum_dy = S::zero();
            let mut sum_dy_xhat = S::zero();
            for bi in 0..b {
                for yy in 0..h {
                    for xx in 0..w {
                        let xhat = (x[[bi, c, yy, xx]] - mean) * inv;
                        let d = dy[[bi, c, yy, xx]];
                        sum_dy += d;
                        sum_dy_xhat += d * xhat;
                    }
                }
            }
            self.gamma.grad[[c]] += sum_dy_xhat;
            self.beta.grad[[c]] += sum_dy;
            // dx = (gamma*inv/n) * (n*dy - sum_dy - xhat*sum_dy_xhat)
            let scale = gam * inv / n;
            for bi in 0..b {
                for yy in 0..h {
                    for xx in 0..w {
                        let xhat = (x[[bi, c, yy, xx]] - mean) * inv;
                        let d = dy[[bi, c, yy, xx]];
                        dx[[bi, c, yy, xx]] = scale * (n * d - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a, S>) {
        out.push((join_name(prefix, "gamma"), &mut self.gamma));
        out.push((join_name(prefix, "beta"), &mut self.beta));
    }

    pub fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut BufferRefs<'a, S>) {
        out.push((join_name(prefix, "running_mean"), &mut self.running_mean));
        out.push((join_name(prefix, "running_var"), &mut self.running_var));
    }
}
