//! Slow, obviously-correct reference implementations used to cross-check the
//! fast kernels.

use crate::blocks::strip::Orientation;
use crate::tensor::{Shape, Tensor};

/// Direct zero-padded cross-correlation, one output element at a time.
pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    groups: usize,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad_h - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad_w - ws.w) / stride + 1;
    let cin_g = xs.c / groups;
    let cout_g = ws.n / groups;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |[n, co, oy, ox]| {
        let g = co / cout_g;
        let mut acc = bias.map_or(0.0, |b| b[co]);
        for ci in 0..cin_g {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * stride + ky) as isize - pad_h as isize;
                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += w.at(co, ci, ky, kx) * x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Transposed convolution by scattering every input pixel through the
/// kernel. Weight layout `(c_in, c_out, k, k)`.
pub fn conv_transpose2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, stride: usize, padding: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h - 1) * stride + ws.h - 2 * padding;
    let ow = (xs.w - 1) * stride + ws.w - 2 * padding;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.c, oh, ow));
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for y in 0..xs.h {
                for xx in 0..xs.w {
                    for co in 0..ws.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let oy = (y * stride + ky) as isize - padding as isize;
                                let ox = (xx * stride + kx) as isize - padding as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let i = out.index(n, co, oy as usize, ox as usize);
                                    out.data_mut()[i] += x.at(n, ci, y, xx) * w.at(ci, co, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..xs.n {
            for co in 0..ws.c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let i = out.index(n, co, y, xx);
                        out.data_mut()[i] += b[co];
                    }
                }
            }
        }
    }
    out
}

/// `X[u, v] = Σ x[y, x]·exp(-2πi(uy/H + vx/W))` per plane, evaluated directly.
pub fn dft2(x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let s = x.shape();
    let tau = 2.0 * std::f64::consts::PI;
    let mut re = Tensor::zeros(s);
    let mut im = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for u in 0..s.h {
                for v in 0..s.w {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            let phase = -tau * ((u * y) as f64 / s.h as f64 + (v * xx) as f64 / s.w as f64);
                            let val = x.at(n, c, y, xx);
                            sr += val * phase.cos();
                            si += val * phase.sin();
                        }
                    }
                    re.set(n, c, u, v, sr);
                    im.set(n, c, u, v, si);
                }
            }
        }
    }
    (re, im)
}

/// Strip pooling by explicit window enumeration: window `j` of `n` over an
/// axis of length `L` starts at `j·⌊L/n⌋` and is `L - (n-1)·⌊L/n⌋` long.
pub fn strip_pool(x: &Tensor<f64>, n: usize, orientation: Orientation) -> Tensor<f64> {
    let s = x.shape();
    let along = match orientation {
        Orientation::Vertical => s.w,
        Orientation::Horizontal => s.h,
    };
    let stride = along / n;
    let len = along - (n - 1) * stride;
    let out_shape = match orientation {
        Orientation::Vertical => Shape::new(s.n, s.c, s.h, n),
        Orientation::Horizontal => Shape::new(s.n, s.c, n, s.w),
    };
    Tensor::from_fn(out_shape, |[b, c, i, j]| {
        let mut total = 0.0;
        let mut count = 0usize;
        for t in 0..along {
            let window = match orientation {
                Orientation::Vertical => j,
                Orientation::Horizontal => i,
            };
            if t >= window * stride && t < window * stride + len {
                total += match orientation {
                    Orientation::Vertical => x.at(b, c, i, t),
                    Orientation::Horizontal => x.at(b, c, t, j),
                };
                count += 1;
            }
        }
        total / count as f64
    })
}

/// Haar analysis of one 2×2 block `[[a, b], [c, d]]` as `(LL, LH, HL, HH)`.
pub fn haar_block(a: f64, b: f64, c: f64, d: f64) -> (f64, f64, f64, f64) {
    (
        (a + b + c + d) / 2.0,
        (a + b - c - d) / 2.0,
        (a - b + c - d) / 2.0,
        (a - b - c + d) / 2.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dft_of_impulse_is_flat() {
        let mut x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        x.set(0, 0, 0, 0, 1.0);
        let (re, im) = dft2(&x);
        assert!(re.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(im.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn naive_conv_box_sum() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, None, 1, 1, 1, 1);
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn haar_block_of_ramp() {
        assert_eq!(haar_block(1.0, 2.0, 3.0, 4.0), (5.0, -2.0, -1.0, 0.0));
    }
}
