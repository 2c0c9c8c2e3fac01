//! Synthetic blurred/sharp pairs and procedural corpora.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::image::{load_image, save_image, write_atomic, Image};
use super::kernel::{make_motion_kernel, BlurKernel};
use crate::error::{contract, Error, Result};
use crate::metrics::{self, MetricReport};
use crate::ops::resize_half;
#[cfg(test)]
use crate::tensor::Shape;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MAX_KERNEL_LENGTH: f64 = 15.0;
pub const MAX_NOISE_SIGMA: f64 = 0.01;
pub const PYRAMID_LEVELS: usize = 3;

/// Blurred and sharp images at full, half and quarter resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub blurred: [Tensor<f32>; PYRAMID_LEVELS],
    pub sharp: [Tensor<f32>; PYRAMID_LEVELS],
}

impl SamplePair {
    pub fn from_tensors(blurred: Tensor<f32>, sharp: Tensor<f32>) -> Result<Self> {
        contract!(blurred.shape() == sharp.shape(), "pair shapes differ: {} vs {}", blurred.shape(), sharp.shape());
        Ok(SamplePair { blurred: pyramid(blurred)?, sharp: pyramid(sharp)? })
    }

    pub fn from_images(blurred: &Image, sharp: &Image) -> Result<Self> {
        Self::from_tensors(blurred.to_tensor(), sharp.to_tensor())
    }
}

/// `[x, half(x), half(half(x))]`; spatial dims must be divisible by 8.
pub fn pyramid(x: Tensor<f32>) -> Result<[Tensor<f32>; PYRAMID_LEVELS]> {
    let s = x.shape();
    contract!(
        s.h % 8 == 0 && s.w % 8 == 0 && s.h > 0 && s.w > 0,
        "image height and width must be divisible by 8, got {}x{}",
        s.h,
        s.w
    );
    let x2 = resize_half(&x)?;
    let x4 = resize_half(&x2)?;
    Ok([x, x2, x4])
}

/// Mixes a base seed with an index so neighbouring indices get unrelated streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n-2`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// `sharp ⊛ kernel` with reflect padding, computed in f64.
pub fn blur(sharp: &Tensor<f64>, kernel: &BlurKernel) -> Tensor<f64> {
    let s = sharp.shape();
    let r = kernel.radius() as isize;
    Tensor::from_fn(s, |[n, c, y, x]| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let w = kernel.at(dy, dx);
                if w != 0.0 {
                    let yy = reflect(y as isize - dy, s.h);
                    let xx = reflect(x as isize - dx, s.w);
                    acc += w * sharp.at(n, c, yy, xx);
                }
            }
        }
        acc
    })
}

/// `clamp(sharp ⊛ kernel + N(0, σ²))` plus both pyramids. Deterministic in `seed`.
pub fn synth_pair(sharp: &Image, kernel: &BlurKernel, noise_sigma: f64, seed: u64) -> Result<SamplePair> {
    contract!(
        sharp.width() % 8 == 0 && sharp.height() % 8 == 0,
        "image height and width must be divisible by 8, got {}x{}",
        sharp.height(),
        sharp.width()
    );
    contract!(
        noise_sigma >= 0.0 && noise_sigma.is_finite(),
        "noise sigma must be a non-negative number, got {noise_sigma}"
    );
    let clean = sharp.to_tensor::<f64>();
    let mut blurred = blur(&clean, kernel);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Contract(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in blurred.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let blurred = blurred.map(|v| v.clamp(0.0, 1.0));
    SamplePair::from_tensors(blurred.cast(), clean.cast())
}

enum Figure {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
    Disc { cx: f64, cy: f64, r: f64, inner: f64 },
    Grating { cx: f64, cy: f64, half: f64, period: f64, cos: f64, sin: f64 },
    Stroke { points: Vec<(f64, f64)>, half_width: f64 },
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

impl Figure {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let cx = rng.random_range(0.0..size);
        let cy = rng.random_range(0.0..size);
        let theta: f64 = rng.random_range(0.0..PI);
        match rng.random_range(0..4) {
            0 => Figure::Rect {
                cx,
                cy,
                hw: rng.random_range(0.05..0.3) * size,
                hh: rng.random_range(0.05..0.3) * size,
                cos: theta.cos(),
                sin: theta.sin(),
            },
            1 => {
                let r = rng.random_range(0.05..0.25) * size;
                let inner = if rng.random_bool(0.4) { r * rng.random_range(0.4..0.8) } else { 0.0 };
                Figure::Disc { cx, cy, r, inner }
            }
            2 => Figure::Grating {
                cx,
                cy,
                half: rng.random_range(0.1..0.3) * size,
                period: rng.random_range(3.0..10.0),
                cos: theta.cos(),
                sin: theta.sin(),
            },
            _ => {
                let n = rng.random_range(2..5);
                let reach = 0.25 * size;
                let mut points = vec![(cx, cy)];
                for _ in 1..n {
                    let &(px, py) = points.last().unwrap_or(&(cx, cy));
                    points.push((px + rng.random_range(-reach..reach), py + rng.random_range(-reach..reach)));
                }
                Figure::Stroke { points, half_width: rng.random_range(0.5..2.0) }
            }
        }
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        match *self {
            Figure::Rect { cx, cy, hw, hh, cos, sin } => {
                let (u, v) = ((x - cx) * cos + (y - cy) * sin, -(x - cx) * sin + (y - cy) * cos);
                u.abs() <= hw && v.abs() <= hh
            }
            Figure::Disc { cx, cy, r, inner } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                d <= r && d >= inner
            }
            Figure::Grating { cx, cy, half, period, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                if dx.abs() > half || dy.abs() > half {
                    return false;
                }
                let u = dx * cos + dy * sin;
                (u / period).rem_euclid(1.0) < 0.5
            }
            Figure::Stroke { ref points, half_width } => points
                .windows(2)
                .any(|w| segment_distance((x, y), w[0], w[1]) <= half_width),
        }
    }
}

/// Procedural sharp image: a two-colour gradient under random rectangles,
/// discs and rings, line gratings and glyph-like strokes, 4×4 supersampled.
pub fn render_scene(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_: u8| rng.random_range(0.0..1.0f64));
    let (c0, c1) = (color(rng), color(rng));
    let g: f64 = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (g.cos(), g.sin());
    let count = rng.random_range(6..13);
    let figures: Vec<(Figure, [f64; 3])> = (0..count)
        .map(|_| {
            let f = Figure::random(rng, size as f64);
            (f, color(rng))
        })
        .collect();
    const SS: usize = 4;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut rgb = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let t = (0.5 + ((px / size as f64 - 0.5) * gx + (py / size as f64 - 0.5) * gy)).clamp(0.0, 1.0);
                    let mut c = [0, 1, 2].map(|k| c0[k] * (1.0 - t) + c1[k] * t);
                    for (f, col) in &figures {
                        if f.covers(px, py) {
                            c = *col;
                        }
                    }
                    for k in 0..3 {
                        rgb[k] += c[k];
                    }
                }
            }
            pixels.extend(rgb.map(|v| (v / (SS * SS) as f64 * 255.0).round() as u8));
        }
    }
    Image::new(size, size, pixels).unwrap_or_else(|_| unreachable!())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub blur: String,
    pub sharp: String,
    pub length: f64,
    pub angle: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the entry file names are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {} {} {} {}\n", e.index, e.blur, e.sharp, e.length, e.angle, e.sigma))
            .collect()
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse { offset: start, message };
            if fields.len() != 6 {
                return Err(bad(format!("manifest row has {} fields, expected 6", fields.len())));
            }
            let num = |k: usize| fields[k].parse::<f64>().map_err(|_| bad(format!("bad number {:?}", fields[k])));
            entries.push(ManifestEntry {
                index: fields[0].parse().map_err(|_| bad(format!("bad index {:?}", fields[0])))?,
                blur: fields[1].to_string(),
                sharp: fields[2].to_string(),
                length: num(3)?,
                angle: num(4)?,
                sigma: num(5)?,
            });
        }
        Ok(Manifest { root, entries })
    }

    /// Reads a manifest file, or `<dir>/manifest.txt` when given a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(blurred, sharp)` images of one entry.
    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(Image, Image)> {
        Ok((load_image(&self.root.join(&entry.blur))?, load_image(&self.root.join(&entry.sharp))?))
    }

    pub fn load_all(&self) -> Result<Vec<(Image, Image)>> {
        self.entries.iter().map(|e| self.load_pair(e)).collect()
    }
}

struct Generated {
    entry: ManifestEntry,
    blurred: Image,
    sharp: Image,
}

fn generate_one(index: usize, size: usize, seed: u64) -> Result<Generated> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    let sharp = render_scene(size, &mut rng);
    let length = rng.random_range(1.0..=MAX_KERNEL_LENGTH);
    let angle = rng.random_range(0.0..PI);
    let sigma = rng.random_range(0.0..=MAX_NOISE_SIGMA);
    let noise_seed: u64 = rng.random();
    let pair = synth_pair(&sharp, &make_motion_kernel(length, angle), sigma, noise_seed)?;
    let blurred = Image::from_tensor(&pair.blurred[0])?;
    let entry = ManifestEntry {
        index,
        blur: format!("{index:04}_blur.ppm"),
        sharp: format!("{index:04}_sharp.ppm"),
        length,
        angle,
        sigma,
    };
    Ok(Generated { entry, blurred, sharp })
}

/// Writes `count` pairs of `size × size` images and `manifest.txt` into
/// `out_dir`. The output depends only on `(count, size, seed)`.
pub fn generate_corpus(count: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    contract!(count >= 1, "corpus count must be at least 1");
    contract!(size >= 8 && size % 8 == 0, "corpus image size must be divisible by 8, got {size}");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| generate_one(i, size, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(count);
    for g in samples {
        save_image(&g.blurred, &out_dir.join(&g.entry.blur))?;
        save_image(&g.sharp, &out_dir.join(&g.entry.sharp))?;
        entries.push(g.entry);
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), entries };
    write_atomic(&manifest.path(), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Metrics of the stored blurred images against their sharp references.
pub fn corpus_baseline(manifest: &Manifest) -> Result<(Vec<MetricReport>, MetricReport)> {
    let reports = manifest
        .entries
        .iter()
        .map(|e| {
            let (b, s) = manifest.load_pair(e)?;
            metrics::evaluate_pair(&b.to_tensor::<f64>(), &s.to_tensor::<f64>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = MetricReport::mean(&reports).ok_or_else(|| Error::Contract("empty manifest".into()))?;
    Ok((reports, mean))
}

/// Sharp image with a vertical step edge; test helper.
pub fn step_edge(size: usize, at: usize) -> Image {
    let mut pixels = Vec::with_capacity(size * size * 3);
    for _ in 0..size {
        for x in 0..size {
            let v = if x < at { 0 } else { 255 };
            pixels.extend([v, v, v]);
        }
    }
    Image::new(size, size, pixels).unwrap_or_else(|_| unreachable!())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_without_noise_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sharp = render_scene(16, &mut rng);
        let p = synth_pair(&sharp, &BlurKernel::identity(), 0.0, 9).unwrap();
        assert_eq!(p.blurred, p.sharp);
    }

    #[test]
    fn five_tap_kernel_ramps_over_five_pixels() {
        let sharp = step_edge(16, 8);
        let p = synth_pair(&sharp, &make_motion_kernel(5.0, 0.0), 0.0, 0).unwrap();
        let row: Vec<f32> = (0..16).map(|x| p.blurred[0].at(0, 0, 5, x)).collect();
        let ramp: Vec<usize> = (0..16).filter(|&x| row[x] > 1e-6 && row[x] < 1.0 - 1e-6).collect();
        assert_eq!(ramp, vec![6, 7, 8, 9]);
        // Five distinct levels from the last dark pixel to the first bright one.
        assert!(row[5] < 1e-6 && row[10] > 1.0 - 1e-6);
        for (k, x) in (6..10).enumerate() {
            assert!((row[x] - 0.2 * (k + 1) as f32).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_is_seeded() {
        let sharp = step_edge(8, 4);
        let k = make_motion_kernel(3.0, 0.3);
        let a = synth_pair(&sharp, &k, 0.01, 5).unwrap();
        let b = synth_pair(&sharp, &k, 0.01, 5).unwrap();
        let c = synth_pair(&sharp, &k, 0.01, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.blurred[0], c.blurred[0]);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_8() {
        let img = Image::new(12, 8, vec![0; 12 * 8 * 3]).unwrap();
        assert!(synth_pair(&img, &BlurKernel::identity(), 0.0, 0).is_err());
    }

    #[test]
    fn pyramid_levels_are_successive_halvings() {
        let p = synth_pair(&step_edge(16, 5), &make_motion_kernel(4.0, 1.0), 0.005, 3).unwrap();
        for lv in [&p.blurred, &p.sharp] {
            assert_eq!(resize_half(&lv[0]).unwrap(), lv[1]);
            assert_eq!(resize_half(&lv[1]).unwrap(), lv[2]);
            assert!(lv.iter().all(|t| t.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        }
        assert_eq!(p.blurred[2].shape(), Shape::new(1, 3, 4, 4));
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn manifest_text_roundtrips() {
        let m = Manifest {
            root: PathBuf::from("x"),
            entries: vec![ManifestEntry {
                index: 3,
                blur: "a.ppm".into(),
                sharp: "b.ppm".into(),
                length: 4.25,
                angle: 0.1,
                sigma: 0.003,
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text(), "x".into()).unwrap(), m);
        match Manifest::parse("0 a b 1 2 3\n1 a b\n", "x".into()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::BTreeSet<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 100);
    }
}
