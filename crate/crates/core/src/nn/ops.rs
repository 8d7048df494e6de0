//! Activation and pooling primitives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};

/// Elementwise max(x, 0).
#[must_use]
pub fn relu<S: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    x.mapv(|v| v.max(S::zero()))
}

/// dL/dx given the relu *output* and dL/dy. Zero inputs pass no gradient.
#[must_use]
pub fn relu_backward<S: Scalar, D: ndarray::Dimension>(
    out: &ndarray::Array<S, D>,
    dy: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(out, |d, &o| {
        if o <= S::zero() {
            *d = S::zero();
        }
    });
    dx
}

/// [B, C, H, W] -> [B, C] spatial mean.
#[must_use]
pub fn global_avg_pool<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (b, c, h, w) = x.dim();
    let inv = S::cast_usize(h * w).recip();
    let mut y = Array2::<S>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut sum = S::zero();
            for yy in 0..h {
                for xx in 0..w {
                    sum += x[[bi, ci, yy, xx]];
                }
            }
            y[[bi, ci]] = sum * inv;
        }
    }
    y
}

/// Spread dL/d(pooled) evenly back over the spatial grid.
#[must_use]
pub fn global_avg_pool_backward<S: Scalar>(dy: &Array2<S>, h: usize, w: usize) -> Array4<S> {
    let (b, c) = dy.dim();
    let inv = S::cast_usize(h * w).recip();
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| dy[[bi, ci]] * inv)
}

/// Max pooling with argmax cache for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Flat (iy * W + ix) source index of each pooled maximum.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub argmax: ndarray::Array4<u32>,
    pub in_h: usize,
    pub in_w: usize,
}

impl MaxPool2d {
    pub fn forward<S: Scalar>(&self, x: &Array4<S>) -> Result<(Array4<S>, MaxPoolCache)> {
        let (b, c, h, w) = x.dim();
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!(
                "maxpool kernel {} does not fit {h}x{w} input",
                self.kernel
            )));
        }
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let mut y = Array4::<S>::zeros((b, c, oh, ow));
        let mut argmax = Array4::<u32>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_ix = 0u32;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[bi, ci, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_ix = (iy as usize * w + ix as usize) as u32;
                                }
                            }
                        }
                        y[[bi, ci, oy, ox]] = best;
                        argmax[[bi, ci, oy, ox]] = best_ix;
                    }
                }
            }
        }
        Ok((
            y,
            MaxPoolCache {
                argmax,
                in_h: h,
                in_w: w,
            },
        ))
    }

    #[must_use]
    pub fn backward<S: Scalar>(&self, cache: &MaxPoolCache, dy: &Array4<S>) -> Array4<S> {
        let (b, c, oh, ow) = dy.dim();
        let mut dx = Array4::<S>::zeros((b, c, cache.in_h, cache.in_w));
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = cache.argmax[[bi, ci, oy, ox]] as usize;
                        let iy = flat / cache.in_w;
                        let ix = flat % cache.in_w;
                        dx[[bi, ci, iy, ix]] += dy[[bi, ci, oy, ox]];
                    }
                }
            }
        }
        dx
    }
}
