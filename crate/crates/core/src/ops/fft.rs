//! Unnormalized forward 2-D DFT of each `(n, c)` plane.
//!
//! Power-of-two axes use an iterative radix-2 Cooley-Tukey transform; any
//! other length falls back to a direct O(N²) DFT along that axis.

use std::f64::consts::PI;

use crate::tensor::{Real, Tensor};

fn bit_reverse_permute<T: Real>(re: &mut [T], im: &mut [T]) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
}

/// Twiddle table `e^{-2πik/n}` for `k < n/2`.
fn twiddles<T: Real>(n: usize) -> Vec<(T, T)> {
    (0..n / 2)
        .map(|k| {
            let a = -2.0 * PI * k as f64 / n as f64;
            (T::of(a.cos()), T::of(a.sin()))
        })
        .collect()
}

fn fft_radix2<T: Real>(re: &mut [T], im: &mut [T], tw: &[(T, T)]) {
    let n = re.len();
    bit_reverse_permute(re, im);
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (wr, wi) = tw[k * step];
                let a = start + k;
                let b = a + half;
                let xr = re[b] * wr - im[b] * wi;
                let xi = re[b] * wi + im[b] * wr;
                re[b] = re[a] - xr;
                im[b] = im[a] - xi;
                re[a] += xr;
                im[a] += xi;
            }
        }
        len <<= 1;
    }
}

fn dft_direct<T: Real>(re: &mut [T], im: &mut [T]) {
    let n = re.len();
    let mut out_re = vec![T::zero(); n];
    let mut out_im = vec![T::zero(); n];
    for k in 0..n {
        let mut sr = T::zero();
        let mut si = T::zero();
        for t in 0..n {
            // Reduce the angle index mod n before converting to keep it small.
            let a = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
            let (c, s) = (T::of(a.cos()), T::of(a.sin()));
            sr += re[t] * c - im[t] * s;
            si += re[t] * s + im[t] * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

/// In-place 1-D DFT of a complex sequence.
pub fn fft1<T: Real>(re: &mut [T], im: &mut [T]) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_radix2(re, im, &twiddles(n));
    } else {
        dft_direct(re, im);
    }
}

/// In-place 2-D DFT of one `h×w` complex plane: rows, then columns.
pub fn fft2_plane<T: Real>(re: &mut [T], im: &mut [T], h: usize, w: usize) {
    let tw_w = twiddles::<T>(w);
    for y in 0..h {
        let (r, i) = (&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w]);
        if w.is_power_of_two() && w > 1 {
            fft_radix2(r, i, &tw_w);
        } else {
            fft1(r, i);
        }
    }
    let tw_h = twiddles::<T>(h);
    let mut cr = vec![T::zero(); h];
    let mut ci = vec![T::zero(); h];
    for x in 0..w {
        for y in 0..h {
            cr[y] = re[y * w + x];
            ci[y] = im[y * w + x];
        }
        if h.is_power_of_two() && h > 1 {
            fft_radix2(&mut cr, &mut ci, &tw_h);
        } else {
            fft1(&mut cr, &mut ci);
        }
        for y in 0..h {
            re[y * w + x] = cr[y];
            im[y * w + x] = ci[y];
        }
    }
}

/// Forward 2-D DFT of a real tensor; returns `(re, im)` of the same shape.
pub fn fft2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let mut re = x.clone();
    let mut im = Tensor::zeros(s);
    let plane = s.plane();
    if plane == 0 {
        return (re, im);
    }
    for (r, i) in re
        .data_mut()
        .chunks_mut(plane)
        .zip(im.data_mut().chunks_mut(plane))
    {
        fft2_plane(r, i, s.h, s.w);
    }
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn constant_image_has_only_dc() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 8, 8), 0.75);
        let (re, im) = fft2(&x);
        assert!((re.data()[0] - 48.0).abs() < 1e-9);
        for i in 1..64 {
            assert!(re.data()[i].abs() < 1e-9 && im.data()[i].abs() < 1e-9);
        }
        assert!(im.data()[0].abs() < 1e-12);
    }

    #[test]
    fn non_power_of_two_falls_back() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 3, 5), |[_, _, y, x]| (y * 5 + x) as f64);
        let (re, _) = fft2(&x);
        assert!((re.data()[0] - x.sum()).abs() < 1e-9);
    }

    #[test]
    fn radix2_matches_direct_1d() {
        let mut a: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let mut ai = vec![0.0; 16];
        let mut b = a.clone();
        let mut bi = ai.clone();
        fft1(&mut a, &mut ai);
        dft_direct(&mut b, &mut bi);
        for k in 0..16 {
            assert!((a[k] - b[k]).abs() < 1e-10);
            assert!((ai[k] - bi[k]).abs() < 1e-10);
        }
    }
}
