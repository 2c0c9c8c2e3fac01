//! Fixed ×2 resampling: 2×2 mean pooling down, bilinear up.

use crate::error::{contract, Result};
use crate::tensor::{Real, Shape, Tensor};

pub fn resize_half<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    contract!(
        s.h % 2 == 0 && s.w % 2 == 0,
        "resize_half needs even height and width, got {s}"
    );
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(os.numel());
    for nc in 0..s.n * s.c {
        let p = &x.data()[nc * s.plane()..][..s.plane()];
        for y in 0..os.h {
            let r0 = &p[2 * y * s.w..][..s.w];
            let r1 = &p[(2 * y + 1) * s.w..][..s.w];
            for xx in 0..os.w {
                out.push((r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn resize_half_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let os = dy.shape();
    let s = Shape::new(os.n, os.c, os.h * 2, os.w * 2);
    let quarter = T::of(0.25);
    Tensor::from_fn(s, |[n, c, y, x]| dy.at(n, c, y / 2, x / 2) * quarter)
}

/// Source taps `(i0, i1, w0, w1)` for each output index of a ×2 bilinear
/// upsample with half-pixel centers: output `i` samples input coordinate
/// `(i + 0.5) / 2 - 0.5`, clamped to the valid range.
fn bilinear_taps<T: Real>(len: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let f = src - i0 as f64;
            (i0, i1, T::of(1.0 - f), T::of(f))
        })
        .collect()
}

pub fn resize_double<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    contract!(s.h > 0 && s.w > 0, "resize_double of empty spatial dims {s}");
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let ty = bilinear_taps::<T>(s.h);
    let tx = bilinear_taps::<T>(s.w);
    let mut out = Vec::with_capacity(os.numel());
    for nc in 0..s.n * s.c {
        let p = &x.data()[nc * s.plane()..][..s.plane()];
        for &(y0, y1, wy0, wy1) in &ty {
            let r0 = &p[y0 * s.w..][..s.w];
            let r1 = &p[y1 * s.w..][..s.w];
            for &(x0, x1, wx0, wx1) in &tx {
                let top = wx0 * r0[x0] + wx1 * r0[x1];
                let bot = wx0 * r1[x0] + wx1 * r1[x1];
                out.push(wy0 * top + wy1 * bot);
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn resize_double_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let os = dy.shape();
    let s = Shape::new(os.n, os.c, os.h / 2, os.w / 2);
    let ty = bilinear_taps::<T>(s.h);
    let tx = bilinear_taps::<T>(s.w);
    let mut dx = Tensor::zeros(s);
    for nc in 0..s.n * s.c {
        let g = &dy.data()[nc * os.plane()..][..os.plane()];
        let d = &mut dx.data_mut()[nc * s.plane()..][..s.plane()];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * os.w + ox];
                d[y0 * s.w + x0] += wy0 * wx0 * v;
                d[y0 * s.w + x1] += wy0 * wx1 * v;
                d[y1 * s.w + x0] += wy1 * wx0 * v;
                d[y1 * s.w + x1] += wy1 * wx1 * v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_is_block_mean() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resize_half(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn half_rejects_odd() {
        assert!(resize_half(&Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn twice_halved_matches_four_by_four_means() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 8, 8), |[_, c, y, x]| {
            ((y * 8 + x) * (c + 1)) as f64 * 0.37 % 5.0
        });
        let q = resize_half(&resize_half(&x).unwrap()).unwrap();
        assert_eq!(q.shape(), Shape::new(1, 2, 2, 2));
        for c in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    let mut s = 0.0;
                    for y in 0..4 {
                        for xx in 0..4 {
                            s += x.at(0, c, by * 4 + y, bx * 4 + xx);
                        }
                    }
                    assert!((q.at(0, c, by, bx) - s / 16.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn double_of_two_samples() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        let y = resize_double(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(&y.data()[..4], &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn double_preserves_constants_and_shape() {
        let x = Tensor::<f32>::full(Shape::new(1, 3, 4, 4), 5.0);
        let y = resize_double(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 8, 8));
        assert!(y.data().iter().all(|&v| v == 5.0));
        let big = resize_double(&Tensor::<f32>::zeros(Shape::new(1, 3, 16, 16))).unwrap();
        assert_eq!(big.shape(), Shape::new(1, 3, 32, 32));
    }

    #[test]
    fn gradients_are_adjoints() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 4, 6), |[_, c, y, x]| (c * 5 + y * 3 + x) as f64 * 0.1);
        let up = resize_double(&x).unwrap();
        let g = Tensor::<f64>::from_fn(up.shape(), |[_, c, y, x]| ((c + y * 7 + x * 3) % 5) as f64 - 2.0);
        let lhs = up.dot(&g);
        let rhs = x.dot(&resize_double_grad(&g));
        assert!((lhs - rhs).abs() < 1e-10);

        let down = resize_half(&x).unwrap();
        let g = Tensor::<f64>::from_fn(down.shape(), |[_, c, y, x]| (c + y + x) as f64 - 1.5);
        assert!((down.dot(&g) - x.dot(&resize_half_grad(&g))).abs() < 1e-10);
    }
}
