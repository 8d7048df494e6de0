//! 2D convolution lowered to matrix multiplication (im2col + GEMM).

use super::{join_name, Param, ParamRefs};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    pub stride: usize,
    pub padding: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl<S: Scalar> Conv2d<S> {
    /// Kaiming-normal (fan-out) initialized convolution.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_out = out_channels * kernel * kernel;
        let std = (2.0 / fan_out as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = Array2::from_shape_fn(
            (out_channels, in_channels * kernel * kernel),
            |_| S::cast(normal.sample(rng)),
        )
        .into_shape_with_order((out_channels, in_channels, kernel, kernel))
        .expect("weight shape")
        .into_dyn();
        let bias = bias.then(|| {
            Param::new(
                ndarray::Array1::<S>::zeros(out_channels).into_dyn(),
                false,
            )
        });
        Conv2d {
            weight: Param::new(weight, true),
            bias,
            stride,
            padding,
            in_channels,
            out_channels,
            kernel,
        }
    }

    #[must_use]
    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn check_input(&self, x: &Array4<S>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!(
                "conv kernel {} does not fit {h}x{w} input with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok(())
    }

    /// `x`: [B, C_in, H, W] -> [B, C_out, OH, OW].
    pub fn forward(&self, x: &Array4<S>) -> Result<Array4<S>> {
        self.check_input(x)?;
        let (b, _, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("weight reshape");
        let mut y = Array4::<S>::zeros((b, self.out_channels, oh, ow));
        let mut cols =
            Array2::<S>::zeros((self.in_channels * self.kernel * self.kernel, oh * ow));
        for bi in 0..b {
            im2col(
                x.index_axis(ndarray::Axis(0), bi),
                self.kernel,
                self.stride,
                self.padding,
                oh,
                ow,
                &mut cols,
            );
            let prod = w_mat.dot(&cols);
            let mut y_s = y.index_axis_mut(ndarray::Axis(0), bi);
            for co in 0..self.out_channels {
                let bias = self
                    .bias
                    .as_ref()
                    .map_or(S::zero(), |p| p.value[[co]]);
                let row = prod.row(co);
                for oy in 0..oh {
                    for ox in 0..ow {
                        y_s[[co, oy, ox]] = row[oy * ow + ox] + bias;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients; returns dL/dx when `need_dx`.
    ///
    /// `x` must be the same tensor the matching forward saw. The column
    /// matrix is rebuilt here rather than cached, trading compute for
    /// activation memory.
    pub fn backward(
        &mut self,
        x: &Array4<S>,
        dy: &Array4<S>,
        need_dx: bool,
    ) -> Result<Option<Array4<S>>> {
        self.check_input(x)?;
        let (b, _, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        if dy.dim() != (b, self.out_channels, oh, ow) {
            return Err(Error::Shape(format!(
                "conv backward output grad shape {:?} does not match forward {:?}",
                dy.dim(),
                (b, self.out_channels, oh, ow)
            )));
        }
        let ckk = self.in_channels * self.kernel * self.kernel;
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, ckk))
            .expect("weight reshape");
        let mut dw_mat = Array2::<S>::zeros((self.out_channels, ckk));
        let mut cols = Array2::<S>::zeros((ckk, oh * ow));
        let mut dx = need_dx.then(|| Array4::<S>::zeros(x.raw_dim()));
        let mut dy_s = Array2::<S>::zeros((self.out_channels, oh * ow));
        for bi in 0..b {
            im2col(
                x.index_axis(ndarray::Axis(0), bi),
                self.kernel,
                self.stride,
                self.padding,
                oh,
                ow,
                &mut cols,
            );
            let dy_b = dy.index_axis(ndarray::Axis(0), bi);
            for co in 0..self.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dy_s[[co, oy * ow + ox]] = dy_b[[co, oy, ox]];
                    }
                }
            }
            dw_mat = dw_mat + dy_s.dot(&cols.t());
            if let Some(bp) = &mut self.bias {
                for co in 0..self.out_channels {
                    bp.grad[[co]] += dy_s.row(co).sum();
                }
            }
            if let Some(dx) = &mut dx {
                let dcols = w_mat.t().dot(&dy_s);
                col2im(
                    &dcols,
                    self.kernel,
                    self.stride,
                    self.padding,
                    oh,
                    ow,
                    dx.index_axis_mut(ndarray::Axis(0), bi),
                );
            }
        }
        let dw = dw_mat
            .into_shape_with_order((
                self.out_channels,
                self.in_channels,
                self.kernel,
                self.kernel,
            ))
            .expect("dw reshape")
            .into_dyn();
        self.weight.grad = &self.weight.grad + &dw;
        Ok(dx)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a, S>) {
        out.push((join_name(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join_name(prefix, "bias"), b));
        }
    }
}

/// Unfold one sample [C, H, W] into columns [C*k*k, OH*OW].
fn im2col<S: Scalar>(
    x: ArrayView3<S>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut Array2<S>,
) {
    let (c_in, h, w) = x.dim();
    debug_assert_eq!(cols.dim(), (c_in * k * k, oh * ow));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let base = oy * ow;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..ow {
                            cols[[row, base + ox]] = S::zero();
                        }
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        cols[[row, base + ox]] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            x[[c, iy, ix as usize]]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add column gradients back onto the input sample.
fn col2im<S: Scalar>(
    dcols: &Array2<S>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    mut dx: ArrayViewMut3<S>,
) {
    let (c_in, h, w) = dx.dim();
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[[c, iy, ix as usize]] += dcols[[row, base + ox]];
                        }
                    }
                }
            }
        }
    }
}
