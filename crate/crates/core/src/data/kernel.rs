//! Linear motion-blur kernels.

use std::collections::BTreeMap;

/// Samples per pixel of segment length when rasterizing.
const SUPERSAMPLE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    /// Odd side length of the square support.
    pub size: usize,
    /// Row-major `size × size` weights summing to 1.
    pub taps: Vec<f64>,
    pub length: f64,
    pub angle: f64,
}

impl BlurKernel {
    pub fn identity() -> Self {
        BlurKernel { size: 1, taps: vec![1.0], length: 1.0, angle: 0.0 }
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    /// Weight at offset `(dy, dx)` from the center.
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius() as isize;
        if dy.abs() > r || dx.abs() > r {
            return 0.0;
        }
        self.taps[((dy + r) as usize) * self.size + (dx + r) as usize]
    }
}

/// A centered segment of `length` pixels at `angle` radians (counter-clockwise
/// from the +x axis, with rows growing downward).
///
/// The segment is cut into `length` unit cells and sampled at cell midpoints.
/// Each sample snaps to the nearest pixel along the dominant axis and is split
/// linearly between the two nearest pixels along the other axis. The cross-axis
/// offset is taken on the segment between the end pixel centres, so a length of
/// 1 is a single tap at any angle. Lengths below 1 are treated as 1.
pub fn make_motion_kernel(length: f64, angle: f64) -> BlurKernel {
    let length = if length.is_finite() { length.max(1.0) } else { 1.0 };
    let (dx, dy) = (angle.cos(), -angle.sin());
    let samples = SUPERSAMPLE * length.ceil() as usize;
    let mut acc: BTreeMap<(isize, isize), f64> = BTreeMap::new();
    let mut splat = |y: isize, x: isize, w: f64| {
        if w > 0.0 {
            *acc.entry((y, x)).or_insert(0.0) += w;
        }
    };
    for j in 0..samples {
        let t = -length / 2.0 + (j as f64 + 0.5) * length / samples as f64;
        let inner = t * (length - 1.0) / length;
        if dx.abs() >= dy.abs() {
            let (x, y) = (t * dx, inner * dy);
            let col = x.round() as isize;
            let lo = y.floor();
            let f = y - lo;
            splat(lo as isize, col, 1.0 - f);
            splat(lo as isize + 1, col, f);
        } else {
            let (x, y) = (inner * dx, t * dy);
            let row = y.round() as isize;
            let lo = x.floor();
            let f = x - lo;
            splat(row, lo as isize, 1.0 - f);
            splat(row, lo as isize + 1, f);
        }
    }
    let r = acc.keys().map(|&(y, x)| y.unsigned_abs().max(x.unsigned_abs())).max().unwrap_or(0);
    let size = 2 * r + 1;
    let total: f64 = acc.values().sum();
    let mut taps = vec![0.0; size * size];
    for ((y, x), w) in acc {
        taps[(y + r as isize) as usize * size + (x + r as isize) as usize] = w / total;
    }
    BlurKernel { size, taps, length, angle }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn unit_length_is_identity() {
        for a in [0.0, 0.7, 2.0] {
            let k = make_motion_kernel(1.0, a);
            assert_eq!(k.size, 1);
            assert_eq!(k.taps, vec![1.0]);
        }
    }

    #[test]
    fn horizontal_five_taps() {
        let k = make_motion_kernel(5.0, 0.0);
        assert_eq!(k.size, 5);
        for x in -2..=2 {
            assert!((k.at(0, x) - 0.2).abs() < 1e-12, "tap {x} = {}", k.at(0, x));
            assert_eq!(k.at(1, x), 0.0);
        }
    }

    #[test]
    fn vertical_is_transpose_of_horizontal() {
        let h = make_motion_kernel(7.0, 0.0);
        let v = make_motion_kernel(7.0, std::f64::consts::FRAC_PI_2);
        for y in -3..=3 {
            assert!((v.at(y, 0) - h.at(0, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_kernels_are_normalized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = make_motion_kernel(rng.random_range(1.0..15.0), rng.random_range(0.0..std::f64::consts::PI));
            assert!((k.taps.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(k.size % 2 == 1 && k.size <= 17);
            assert!(k.taps.iter().all(|&t| t >= 0.0));
        }
    }
}
