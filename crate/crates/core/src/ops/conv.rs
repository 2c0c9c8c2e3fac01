//! Direct 2-D convolution kernels (cross-correlation, zero padding).
//!
//! Weights are stored as tensors of shape `(c_out, c_in / groups, kh, kw)`.
//! The transposed convolution is the adjoint of [`conv2d`] and shares its
//! input-gradient kernel.

use rayon::prelude::*;

use crate::error::{contract, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Stride, padding and grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            pad_h: padding,
            pad_w: padding,
            groups,
        }
    }

    /// Stride 1 with `(k - 1) / 2` padding for a `kh×kw` kernel.
    pub const fn same(kh: usize, kw: usize, groups: usize) -> Self {
        ConvGeometry {
            stride: 1,
            pad_h: (kh - 1) / 2,
            pad_w: (kw - 1) / 2,
            groups,
        }
    }
}

fn out_len(len: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Validates shapes and returns the output shape of a forward convolution.
pub fn conv2d_out_shape(x: Shape, w: Shape, geom: ConvGeometry) -> Result<Shape> {
    contract!(geom.stride >= 1, "stride must be at least 1");
    contract!(geom.groups >= 1, "groups must be at least 1");
    contract!(
        x.c % geom.groups == 0,
        "input channels {} not divisible by groups {}",
        x.c,
        geom.groups
    );
    contract!(
        w.n % geom.groups == 0,
        "output channels {} not divisible by groups {}",
        w.n,
        geom.groups
    );
    contract!(
        w.c == x.c / geom.groups,
        "weight in-channel dimension {} does not match input channels {} / groups {}",
        w.c,
        x.c,
        geom.groups
    );
    let oh = out_len(x.h, geom.pad_h, w.h, geom.stride);
    let ow = out_len(x.w, geom.pad_w, w.w, geom.stride);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape::new(x.n, w.n, oh, ow)),
        _ => Err(crate::Error::Contract(format!(
            "kernel {}x{} larger than padded input height {} / width {}",
            w.h,
            w.w,
            x.h + 2 * geom.pad_h,
            x.w + 2 * geom.pad_w
        ))),
    }
}

/// Range of output columns `ox` whose source column `ox*s + kx - pad` lies in `[0, in_w)`.
#[inline]
fn valid_range(out_w: usize, in_w: usize, kx: usize, pad: usize, stride: usize) -> (usize, usize) {
    // ox*s + kx >= pad  and  ox*s + kx < in_w + pad
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if in_w + pad > kx {
        ((in_w + pad - kx - 1) / stride + 1).min(out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv2d_out_shape(xs, ws, geom)?;
    if let Some(b) = bias {
        contract!(
            b.numel() == ws.n,
            "bias length {} does not match output channels {}",
            b.numel(),
            ws.n
        );
    }
    let cog = ws.n / geom.groups;
    let cig = ws.c;
    let (kh, kw) = (ws.h, ws.w);
    let (oh, ow) = (os.h, os.w);
    let plane_in = xs.plane();
    let s = geom.stride;
    let xd = x.data();
    let wd = w.data();

    let mut out = vec![T::zero(); os.numel()];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(idx, oplane)| {
        let n = idx / os.c;
        let o = idx % os.c;
        if let Some(b) = bias {
            oplane.fill(b.data()[o]);
        }
        let g = o / cog;
        for ci in 0..cig {
            let cin = g * cig + ci;
            let iplane = &xd[(n * xs.c + cin) * plane_in..][..plane_in];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((o * cig + ci) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (lo, hi) = valid_range(ow, xs.w, kx, geom.pad_w, s);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - geom.pad_h as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * xs.w..][..xs.w];
                        let orow = &mut oplane[oy * ow..][..ow];
                        if s == 1 {
                            let off = lo + kx - geom.pad_w;
                            for (ov, &iv) in orow[lo..hi].iter_mut().zip(&irow[off..]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * irow[ox * s + kx - geom.pad_w];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(os, out)
}

/// Gradient of [`conv2d`] with respect to its input, given the upstream
/// gradient `dy` and the input shape. This is also the forward pass of the
/// transposed convolution.
pub fn conv2d_input_grad<T: Real>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: Shape,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let ws = w.shape();
    let os = conv2d_out_shape(x_shape, ws, geom)?;
    contract!(
        os == dy.shape(),
        "upstream gradient shape {} does not match convolution output {}",
        dy.shape(),
        os
    );
    let cog = ws.n / geom.groups;
    let cig = ws.c;
    let (kh, kw) = (ws.h, ws.w);
    let (oh, ow) = (os.h, os.w);
    let xs = x_shape;
    let s = geom.stride;
    let dyd = dy.data();
    let wd = w.data();

    let mut dx = vec![T::zero(); xs.numel()];
    dx.par_chunks_mut(xs.plane()).enumerate().for_each(|(idx, xplane)| {
        let n = idx / xs.c;
        let cin = idx % xs.c;
        let g = cin / cig;
        let ci = cin % cig;
        for o in g * cog..(g + 1) * cog {
            let dplane = &dyd[(n * os.c + o) * oh * ow..][..oh * ow];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((o * cig + ci) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (lo, hi) = valid_range(ow, xs.w, kx, geom.pad_w, s);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - geom.pad_h as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let xrow = &mut xplane[iy as usize * xs.w..][..xs.w];
                        let drow = &dplane[oy * ow..][..ow];
                        if s == 1 {
                            let off = lo + kx - geom.pad_w;
                            for (xv, &dv) in xrow[off..].iter_mut().zip(&drow[lo..hi]) {
                                *xv += wv * dv;
                            }
                        } else {
                            for ox in lo..hi {
                                xrow[ox * s + kx - geom.pad_w] += wv * drow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(xs, dx)
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    w_shape: Shape,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w_shape;
    let os = conv2d_out_shape(xs, ws, geom)?;
    contract!(
        os == dy.shape(),
        "upstream gradient shape {} does not match convolution output {}",
        dy.shape(),
        os
    );
    let cog = ws.n / geom.groups;
    let cig = ws.c;
    let (kh, kw) = (ws.h, ws.w);
    let (oh, ow) = (os.h, os.w);
    let s = geom.stride;
    let xd = x.data();
    let dyd = dy.data();

    let per_out = cig * kh * kw;
    let mut dw = vec![T::zero(); ws.numel()];
    dw.par_chunks_mut(per_out).enumerate().for_each(|(o, wchunk)| {
        let g = o / cog;
        for n in 0..xs.n {
            let dplane = &dyd[(n * os.c + o) * oh * ow..][..oh * ow];
            for ci in 0..cig {
                let cin = g * cig + ci;
                let iplane = &xd[(n * xs.c + cin) * xs.plane()..][..xs.plane()];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (lo, hi) = valid_range(ow, xs.w, kx, geom.pad_w, s);
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - geom.pad_h as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let irow = &iplane[iy as usize * xs.w..][..xs.w];
                            let drow = &dplane[oy * ow..][..ow];
                            if s == 1 {
                                let off = lo + kx - geom.pad_w;
                                acc += drow[lo..hi]
                                    .iter()
                                    .zip(&irow[off..])
                                    .map(|(&d, &v)| d * v)
                                    .sum::<T>();
                            } else {
                                for ox in lo..hi {
                                    acc += drow[ox] * irow[ox * s + kx - geom.pad_w];
                                }
                            }
                        }
                        wchunk[(ci * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });
    Tensor::from_vec(ws, dw)
}

/// Per-output-channel sum of an upstream gradient.
pub fn bias_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let mut db = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, acc) in db.iter_mut().enumerate() {
            *acc += dy.plane(n, c).iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(Shape::new(1, s.c, 1, 1), db).expect("bias length")
}

/// Output shape of a transposed convolution with weight `(c_in, c_out, k, k)`.
pub fn conv_transpose2d_out_shape(x: Shape, w: Shape, stride: usize, padding: usize) -> Result<Shape> {
    contract!(stride >= 1, "stride must be at least 1");
    contract!(
        w.n == x.c,
        "transposed-conv weight in-channel dimension {} does not match input channels {}",
        w.n,
        x.c
    );
    contract!(
        x.h >= 1 && x.w >= 1,
        "transposed convolution of an empty input {x}"
    );
    let oh = ((x.h - 1) * stride + w.h).checked_sub(2 * padding);
    let ow = ((x.w - 1) * stride + w.w).checked_sub(2 * padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(Shape::new(x.n, w.c, oh, ow)),
        _ => Err(crate::Error::Contract(format!(
            "padding {padding} too large for transposed convolution of {x}"
        ))),
    }
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same weight,
/// stride and padding. `w` has shape `(c_in, c_out, k, k)`.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let os = conv_transpose2d_out_shape(x.shape(), w.shape(), stride, padding)?;
    let geom = ConvGeometry::new(stride, padding, 1);
    // The adjoint conv maps `os` back to (n, c_in, ..); its output size must
    // round-trip to the input dims, which holds whenever the formula above is
    // exact.
    let back = conv2d_out_shape(os, w.shape(), geom)?;
    contract!(
        back == x.shape(),
        "transposed convolution of {} is not invertible with stride {stride}, padding {padding}",
        x.shape()
    );
    let mut out = conv2d_input_grad(x, w, os, geom)?;
    if let Some(b) = bias {
        contract!(
            b.numel() == os.c,
            "bias length {} does not match output channels {}",
            b.numel(),
            os.c
        );
        let plane = os.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[i % os.c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}
