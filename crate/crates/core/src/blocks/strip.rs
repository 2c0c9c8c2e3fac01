//! Strip pooling over long thin windows and the nearest-index expansion back
//! to full resolution.
//!
//! For strip count `n` along an axis of length `L`, the stride is
//! `S = ⌊L/n⌋` and every window has length `K = L - (n-1)·S`, so window `j`
//! covers `[j·S, j·S + K)` and the last window ends exactly at `L`.

use crate::autodiff::Var;
use crate::error::{contract, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const STRIP_SIZES: [usize; 4] = [1, 3, 5, 7];

/// Which strip map to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// `H×n` map: each row pooled over `n` windows along the width.
    Vertical,
    /// `n×W` map: each column pooled over `n` windows along the height.
    Horizontal,
}

/// `(stride, window)` for `n` strips over an axis of length `len`.
pub fn strip_geometry(len: usize, n: usize) -> (usize, usize) {
    let stride = len / n;
    (stride, len - (n - 1) * stride)
}

fn check(s: Shape, n: usize) -> Result<()> {
    contract!(n >= 1, "strip count must be positive");
    contract!(
        n <= s.h.min(s.w),
        "strip count {n} exceeds min(H, W) = {} for {s}",
        s.h.min(s.w)
    );
    Ok(())
}

pub fn strip_pool<T: Real>(fm: &Tensor<T>, n: usize, orientation: Orientation) -> Result<Tensor<T>> {
    let s = fm.shape();
    check(s, n)?;
    match orientation {
        Orientation::Vertical => {
            let (stride, k) = strip_geometry(s.w, n);
            let inv = T::one() / T::of(k as f64);
            Ok(Tensor::from_fn(Shape::new(s.n, s.c, s.h, n), |[b, c, i, j]| {
                let p = fm.plane(b, c);
                let row = &p[i * s.w..][..s.w];
                row[j * stride..j * stride + k].iter().copied().sum::<T>() * inv
            }))
        }
        Orientation::Horizontal => {
            let (stride, k) = strip_geometry(s.h, n);
            let inv = T::one() / T::of(k as f64);
            Ok(Tensor::from_fn(Shape::new(s.n, s.c, n, s.w), |[b, c, i, j]| {
                let p = fm.plane(b, c);
                (0..k).map(|t| p[(i * stride + t) * s.w + j]).sum::<T>() * inv
            }))
        }
    }
}

/// Adjoint of [`strip_pool`].
pub fn strip_pool_grad<T: Real>(dy: &Tensor<T>, input: Shape, n: usize, orientation: Orientation) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let ds = dy.shape();
    match orientation {
        Orientation::Vertical => {
            let (stride, k) = strip_geometry(input.w, n);
            let inv = T::one() / T::of(k as f64);
            for b in 0..input.n {
                for c in 0..input.c {
                    for i in 0..input.h {
                        for j in 0..n {
                            let g = dy.at(b, c, i, j) * inv;
                            let base = dx.index(b, c, i, j * stride);
                            dx.data_mut()[base..base + k].iter_mut().for_each(|v| *v += g);
                        }
                    }
                }
            }
        }
        Orientation::Horizontal => {
            let (stride, k) = strip_geometry(input.h, n);
            let inv = T::one() / T::of(k as f64);
            for b in 0..input.n {
                for c in 0..input.c {
                    for i in 0..n {
                        for j in 0..ds.w {
                            let g = dy.at(b, c, i, j) * inv;
                            for t in 0..k {
                                let idx = dx.index(b, c, i * stride + t, j);
                                dx.data_mut()[idx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Source index in a strip map of length `n` for full-resolution index `i`
/// along an axis of length `len`: `⌊n·i/len⌋`.
#[inline]
pub fn expand_index(i: usize, n: usize, len: usize) -> usize {
    n * i / len
}

/// Expands a strip map back to `h×w` with the nearest-index map.
pub fn strip_expand<T: Real>(y: &Tensor<T>, orientation: Orientation, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = y.shape();
    match orientation {
        Orientation::Vertical => {
            contract!(s.h == h, "vertical strip map {s} does not match height {h}");
            let n = s.w;
            Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |[b, c, i, j]| {
                y.at(b, c, i, expand_index(j, n, w))
            }))
        }
        Orientation::Horizontal => {
            contract!(s.w == w, "horizontal strip map {s} does not match width {w}");
            let n = s.h;
            Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |[b, c, i, j]| {
                y.at(b, c, expand_index(i, n, h), j)
            }))
        }
    }
}

fn strip_expand_grad<T: Real>(dy: &Tensor<T>, strip: Shape, orientation: Orientation) -> Tensor<T> {
    let s = dy.shape();
    let mut dx = Tensor::zeros(strip);
    for b in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    let (si, sj) = match orientation {
                        Orientation::Vertical => (i, expand_index(j, strip.w, s.w)),
                        Orientation::Horizontal => (expand_index(i, strip.h, s.h), j),
                    };
                    let idx = dx.index(b, c, si, sj);
                    dx.data_mut()[idx] += dy.at(b, c, i, j);
                }
            }
        }
    }
    dx
}

pub fn strip_pool_var<'t, T: Real>(fm: &Var<'t, T>, n: usize, orientation: Orientation) -> Result<Var<'t, T>> {
    let y = strip_pool(fm.value(), n, orientation)?;
    let input = fm.shape();
    Ok(fm.tape().record(&[fm], y, move || {
        Box::new(move |g, _| vec![Some(strip_pool_grad(g, input, n, orientation))])
    }))
}

pub fn strip_expand_var<'t, T: Real>(
    y: &Var<'t, T>,
    orientation: Orientation,
    h: usize,
    w: usize,
) -> Result<Var<'t, T>> {
    let out = strip_expand(y.value(), orientation, h, w)?;
    let strip = y.shape();
    Ok(y.tape().record(&[y], out, move || {
        Box::new(move |g, _| vec![Some(strip_expand_grad(g, strip, orientation))])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 2, h, w), |[_, c, y, x]| (c * 100 + y * w + x) as f64)
    }

    #[test]
    fn single_strip_is_axis_mean() {
        let x = ramp(4, 6);
        let v = strip_pool(&x, 1, Orientation::Vertical).unwrap();
        assert_eq!(v.shape(), Shape::new(1, 2, 4, 1));
        for i in 0..4 {
            let mean = (0..6).map(|j| x.at(0, 1, i, j)).sum::<f64>() / 6.0;
            assert_eq!(v.at(0, 1, i, 0), mean);
        }
        let h = strip_pool(&x, 1, Orientation::Horizontal).unwrap();
        assert_eq!(h.shape(), Shape::new(1, 2, 1, 6));
    }

    #[test]
    fn three_strips_over_width_six() {
        assert_eq!(strip_geometry(6, 3), (2, 2));
        let x = ramp(4, 6);
        let v = strip_pool(&x, 3, Orientation::Vertical).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let expect = (x.at(0, 0, i, 2 * j) + x.at(0, 0, i, 2 * j + 1)) / 2.0;
                assert_eq!(v.at(0, 0, i, j), expect);
            }
        }
    }

    #[test]
    fn windows_tile_each_axis() {
        for len in 1..40 {
            for n in STRIP_SIZES.into_iter().filter(|&n| n <= len) {
                let (s, k) = strip_geometry(len, n);
                assert_eq!((n - 1) * s + k, len);
            }
        }
    }

    #[test]
    fn too_many_strips_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 5, 8));
        assert!(strip_pool(&x, 7, Orientation::Horizontal).is_err());
        assert!(strip_pool(&x, 7, Orientation::Vertical).is_err());
    }

    #[test]
    fn expand_uses_floor_index_map() {
        let y = Tensor::<f64>::from_fn(Shape::new(1, 1, 1, 3), |[_, _, _, j]| j as f64);
        let e = strip_expand(&y, Orientation::Vertical, 1, 6).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn pool_grad_is_adjoint() {
        let x = ramp(7, 12);
        for n in STRIP_SIZES {
            for o in [Orientation::Vertical, Orientation::Horizontal] {
                let y = strip_pool(&x, n, o).unwrap();
                let g = Tensor::from_fn(y.shape(), |[_, c, i, j]| ((c + 3 * i + 5 * j) % 7) as f64 - 3.0);
                let lhs = y.dot(&g);
                let rhs = x.dot(&strip_pool_grad(&g, x.shape(), n, o));
                assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
            }
        }
    }
}
