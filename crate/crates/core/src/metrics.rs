//! Full-reference image quality: MSE, PSNR, SSIM and pixel-domain VIF.
//!
//! All statistics are accumulated in f64 regardless of the tensor element
//! type. PSNR of identical images is `f64::INFINITY`, which formats as `inf`.

use crate::error::{contract, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const VIF_NOISE_VAR: f64 = 2.0;
pub const VIF_SCALES: usize = 4;
pub const VIF_MIN_SIZE: usize = 32;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SsimMode {
    /// One statistic from whole-image moments.
    Global,
    /// Mean over all 11×11 Gaussian-weighted windows.
    #[default]
    Windowed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub vif: f64,
    pub mse: f64,
}

impl MetricReport {
    /// Element-wise mean; any infinite PSNR makes the mean PSNR infinite.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            vif: avg(|r| r.vif),
            mse: avg(|r| r.mse),
        })
    }
}

fn same_shape<T: Real>(s: &Tensor<T>, i: &Tensor<T>) -> Result<()> {
    contract!(s.shape() == i.shape(), "metric inputs differ in shape: {} vs {}", s.shape(), i.shape());
    contract!(s.numel() > 0, "metric inputs are empty");
    Ok(())
}

pub fn mse<T: Real>(s: &Tensor<T>, i: &Tensor<T>) -> Result<f64> {
    same_shape(s, i)?;
    let sum: f64 = s
        .data()
        .iter()
        .zip(i.data())
        .map(|(&a, &b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(sum / s.numel() as f64)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr<T: Real>(s: &Tensor<T>, i: &Tensor<T>, max_val: f64) -> Result<f64> {
    contract!(max_val > 0.0, "max_val must be positive, got {max_val}");
    Ok(psnr_from_mse(mse(s, i)?, max_val))
}

/// Normalized 1-D Gaussian taps of odd length `n`.
pub fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let r = (n / 2) as f64;
    let taps: Vec<f64> = (0..n)
        .map(|k| {
            let d = k as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

/// Row-major single-channel plane.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Separable correlation with `taps`, keeping only fully covered positions.
    fn filter_valid(&self, taps: &[f64]) -> Plane {
        let k = taps.len();
        if self.h < k || self.w < k {
            return Plane { h: 0, w: 0, v: Vec::new() };
        }
        let (oh, ow) = (self.h - k + 1, self.w - k + 1);
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let src = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, s)| t * s).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for (j, t) in taps.iter().enumerate() {
                let src = &rows[(y + j) * ow..(y + j + 1) * ow];
                for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                    *o += t * s;
                }
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    fn subsample(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut v = Vec::with_capacity(h * w);
        for y in (0..self.h).step_by(2) {
            for x in (0..self.w).step_by(2) {
                v.push(self.v[y * self.w + x]);
            }
        }
        Plane { h, w, v }
    }
}

fn planes<T: Real>(t: &Tensor<T>) -> Vec<Plane> {
    let s = t.shape();
    (0..s.n)
        .flat_map(|n| (0..s.c).map(move |c| (n, c)))
        .map(|(n, c)| Plane { h: s.h, w: s.w, v: t.plane(n, c).iter().map(|x| x.f64()).collect() })
        .collect()
}

fn ssim_stat(mu_s: f64, mu_i: f64, var_s: f64, var_i: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    // C3 = C2 / 2 folds contrast and structure into one term.
    let l = (2.0 * mu_s * mu_i + c1) / (mu_s * mu_s + mu_i * mu_i + c1);
    let cs = (2.0 * cov + c2) / (var_s + var_i + c2);
    l * cs
}

fn ssim_global_plane(s: &Plane, i: &Plane, c1: f64, c2: f64) -> f64 {
    let n = s.v.len() as f64;
    let mu_s = s.v.iter().sum::<f64>() / n;
    let mu_i = i.v.iter().sum::<f64>() / n;
    let (mut vs, mut vi, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in s.v.iter().zip(&i.v) {
        vs += (a - mu_s) * (a - mu_s);
        vi += (b - mu_i) * (b - mu_i);
        cov += (a - mu_s) * (b - mu_i);
    }
    ssim_stat(mu_s, mu_i, vs / n, vi / n, cov / n, c1, c2)
}

fn ssim_windowed_plane(s: &Plane, i: &Plane, c1: f64, c2: f64, taps: &[f64]) -> f64 {
    let mu_s = s.filter_valid(taps);
    let mu_i = i.filter_valid(taps);
    let ss = s.zip(s, |a, b| a * b).filter_valid(taps);
    let ii = i.zip(i, |a, b| a * b).filter_valid(taps);
    let si = s.zip(i, |a, b| a * b).filter_valid(taps);
    let total: f64 = (0..mu_s.v.len())
        .map(|k| {
            let (ms, mi) = (mu_s.v[k], mu_i.v[k]);
            ssim_stat(ms, mi, ss.v[k] - ms * ms, ii.v[k] - mi * mi, si.v[k] - ms * mi, c1, c2)
        })
        .sum();
    total / mu_s.v.len() as f64
}

/// Mean SSIM over every `(n, c)` plane.
pub fn ssim<T: Real>(s: &Tensor<T>, i: &Tensor<T>, max_val: f64, mode: SsimMode) -> Result<f64> {
    same_shape(s, i)?;
    contract!(max_val > 0.0, "max_val must be positive, got {max_val}");
    let shape = s.shape();
    if mode == SsimMode::Windowed {
        contract!(
            shape.h >= SSIM_WINDOW && shape.w >= SSIM_WINDOW,
            "windowed SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            shape.h,
            shape.w
        );
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (ps, pi) = (planes(s), planes(i));
    let total: f64 = ps
        .iter()
        .zip(&pi)
        .map(|(a, b)| match mode {
            SsimMode::Global => ssim_global_plane(a, b, c1, c2),
            SsimMode::Windowed => ssim_windowed_plane(a, b, c1, c2, &taps),
        })
        .sum();
    Ok(total / ps.len() as f64)
}

/// Luma planes, one per batch item; single-channel input is used as is.
fn luma<T: Real>(t: &Tensor<T>, scale: f64) -> Result<Vec<Plane>> {
    let s = t.shape();
    contract!(s.c == 3 || s.c == 1, "expected 1 or 3 channels, got {}", s.c);
    Ok((0..s.n)
        .map(|n| {
            let v = (0..s.plane())
                .map(|k| {
                    let y = if s.c == 1 {
                        t.plane(n, 0)[k].f64()
                    } else {
                        (0..3).map(|c| LUMA[c] * t.plane(n, c)[k].f64()).sum()
                    };
                    y * scale
                })
                .collect();
            Plane { h: s.h, w: s.w, v }
        })
        .collect())
}

/// `(numerator, denominator)` sums of one reference/distorted plane pair.
fn vifp_sums(reference: &Plane, distorted: &Plane) -> (f64, f64) {
    let (mut r, mut d) = (reference.clone(), distorted.clone());
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=VIF_SCALES {
        let n = (1usize << (VIF_SCALES - scale + 1)) + 1;
        let taps = gaussian_taps(n, n as f64 / 5.0);
        if scale > 1 {
            r = r.filter_valid(&taps).subsample();
            d = d.filter_valid(&taps).subsample();
        }
        let mu1 = r.filter_valid(&taps);
        let mu2 = d.filter_valid(&taps);
        let s11 = r.zip(&r, |a, b| a * b).filter_valid(&taps);
        let s22 = d.zip(&d, |a, b| a * b).filter_valid(&taps);
        let s12 = r.zip(&d, |a, b| a * b).filter_valid(&taps);
        for k in 0..mu1.v.len() {
            let (m1, m2) = (mu1.v[k], mu2.v[k]);
            let mut sigma1 = (s11.v[k] - m1 * m1).max(0.0);
            let sigma2 = (s22.v[k] - m2 * m2).max(0.0);
            let sigma12 = s12.v[k] - m1 * m2;
            let mut g = sigma12 / (sigma1 + 1e-10);
            let mut sv = sigma2 - g * sigma12;
            if sigma1 < 1e-10 {
                g = 0.0;
                sv = sigma2;
                sigma1 = 0.0;
            }
            if sigma2 < 1e-10 {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = sigma2;
                g = 0.0;
            }
            let sv = sv.max(1e-10);
            num += (1.0 + g * g * sigma1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + sigma1 / VIF_NOISE_VAR).log10();
        }
    }
    (num, den)
}

/// Pixel-domain visual information fidelity of `i` against reference `s`.
///
/// Images are converted to luma and rescaled so `max_val` maps to 255, the
/// range the fixed noise variance assumes. Batches are pooled.
pub fn vifp<T: Real>(s: &Tensor<T>, i: &Tensor<T>, max_val: f64) -> Result<f64> {
    same_shape(s, i)?;
    contract!(max_val > 0.0, "max_val must be positive, got {max_val}");
    let shape = s.shape();
    contract!(
        shape.h >= VIF_MIN_SIZE && shape.w >= VIF_MIN_SIZE,
        "VIF needs at least {VIF_MIN_SIZE}x{VIF_MIN_SIZE} pixels, got {}x{}",
        shape.h,
        shape.w
    );
    let k = 255.0 / max_val;
    let (num, den) = luma(s, k)?
        .iter()
        .zip(&luma(i, k)?)
        .map(|(a, b)| vifp_sums(a, b))
        .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    if den <= 0.0 {
        // A constant reference carries no information to lose.
        return Ok(1.0);
    }
    Ok(num / den)
}

/// Clamp to [0, 1], scale to 255 and round: the values a saved 8-bit image holds.
pub fn quantize<T: Real>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast::<f64>().map(|v| (v.clamp(0.0, 1.0) * 255.0).round())
}

/// All metrics on 8-bit-quantized copies of `restored` and `sharp`.
pub fn evaluate_pair<T: Real>(restored: &Tensor<T>, sharp: &Tensor<T>) -> Result<MetricReport> {
    let (r, s) = (quantize(restored), quantize(sharp));
    let mse = mse(&s, &r)?;
    Ok(MetricReport {
        psnr: psnr_from_mse(mse, 255.0),
        ssim: ssim(&s, &r, 255.0, SsimMode::Windowed)?,
        vif: vifp(&s, &r, 255.0)?,
        mse,
    })
}

/// 3×3-or-larger box blur with clamped borders; test and diagnostic helper.
pub fn box_blur<T: Real>(t: &Tensor<T>, radius: usize) -> Tensor<T> {
    let s = t.shape();
    let r = radius as isize;
    Tensor::from_fn(Shape::new(s.n, s.c, s.h, s.w), |[n, c, y, x]| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = (y as isize + dy).clamp(0, s.h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, s.w as isize - 1) as usize;
                acc += t.at(n, c, yy, xx).f64();
            }
        }
        T::of(acc / ((2 * r + 1) * (2 * r + 1)) as f64)
    })
}
