//! Built-in verification suites: the fast kernels against the reference
//! implementations in [`crate::oracle`], wavelet reconstruction, and
//! finite-difference gradient checks.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Var};
use crate::blocks::{self, strip, FebpLevel, Orientation};
use crate::gradcheck::{self, GradCheck, DEFAULT_STEP};
use crate::network::{self, ModelConfig};
use crate::objectives::{total_loss, SpectralNorm};
use crate::ops::{self, ConvGeometry, NormMode};
use crate::params::{ForwardOptions, Layout};
use crate::tensor::{Shape, Tensor};
use crate::{oracle, wavelet, Result};

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

/// Test-only fault injection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hooks {
    /// Nudge one kernel weight before the fast convolution runs.
    pub perturb_conv: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:.2}s {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

type Outcome = std::result::Result<String, String>;

fn rand_t(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.max_abs_diff(b) / scale
}

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// `cases` random convolutions (and as many transposed ones) against the
/// direct oracles; relative error must stay below 1e-6.
pub fn conv_oracle(cases: usize, seed: u64, hooks: Hooks) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let groups = [1, 2, 4][rng.random_range(0..3)];
        let c_in = groups * rng.random_range(1..3);
        let c_out = groups * rng.random_range(1..3);
        let (kh, kw) = (rng.random_range(1..6), rng.random_range(1..6));
        let stride = rng.random_range(1..3);
        let (pad_h, pad_w) = (rng.random_range(0..3), rng.random_range(0..3));
        let (h, w) = (rng.random_range(kh.max(3)..10), rng.random_range(kw.max(3)..10));
        let n = rng.random_range(1..3);
        let x = rand_t(Shape::new(n, c_in, h, w), &mut rng);
        let wt = rand_t(Shape::new(c_out, c_in / groups, kh, kw), &mut rng);
        let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fast_w = wt.clone();
        if hooks.perturb_conv {
            fast_w.data_mut()[0] += 1e-3;
        }
        let b = Tensor::from_vec(Shape::new(1, c_out, 1, 1), bias.clone()).map_err(|e| e.to_string())?;
        let geom = ConvGeometry { stride, pad_h, pad_w, groups };
        let fast = lib(ops::conv2d(&x, &fast_w, Some(&b), geom))?;
        let slow = oracle::conv2d(&x, &wt, Some(&bias), stride, pad_h, pad_w, groups);
        let e = rel_diff(&fast, &slow);
        worst = worst.max(e);
        if e >= 1e-6 {
            return Err(format!("conv case {case}: relative error {e:.3e}"));
        }

        let k: usize = rng.random_range(1..5);
        let s = rng.random_range(1..3);
        let p = rng.random_range(0..k.div_ceil(2));
        let xt = rand_t(Shape::new(1, c_in, 4, 3), &mut rng);
        let wt = rand_t(Shape::new(c_in, c_out, k, k), &mut rng);
        let mut fast_w = wt.clone();
        if hooks.perturb_conv {
            fast_w.data_mut()[0] += 1e-3;
        }
        let fast = lib(ops::conv_transpose2d(&xt, &fast_w, None, s, p))?;
        let slow = oracle::conv_transpose2d(&xt, &wt, None, s, p);
        let e = rel_diff(&fast, &slow);
        worst = worst.max(e);
        if e >= 1e-6 {
            return Err(format!("transposed conv case {case}: relative error {e:.3e}"));
        }
    }
    Ok(format!("{cases} cases, worst relative error {worst:.2e}"))
}

/// `fft2` against the direct DFT at the given sizes, relative error < 1e-5.
pub fn dft_oracle(sizes: &[(usize, usize)], seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for &(h, w) in sizes {
        let x = rand_t(Shape::new(1, 2, h, w), &mut rng);
        let (re, im) = ops::fft2(&x);
        let (ore, oim) = oracle::dft2(&x);
        let e = rel_diff(&re, &ore).max(rel_diff(&im, &oim));
        worst = worst.max(e);
        if e >= 1e-5 {
            return Err(format!("{h}x{w}: relative error {e:.3e}"));
        }
        // Same transform in single precision.
        let (re32, im32) = ops::fft2(&x.cast::<f32>());
        let e = rel_diff(&re32.cast(), &ore).max(rel_diff(&im32.cast(), &oim));
        worst = worst.max(e);
        if e >= 1e-5 {
            return Err(format!("{h}x{w} f32: relative error {e:.3e}"));
        }
    }
    Ok(format!("{} sizes, worst relative error {worst:.2e}", sizes.len()))
}

/// Strip pooling against window enumeration, exact to 1e-12.
pub fn strip_oracle(sizes: &[usize], seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for &h in sizes {
        for &w in sizes {
            let x = rand_t(Shape::new(1, 2, h, w), &mut rng);
            for n in strip::STRIP_SIZES {
                if n > h.min(w) {
                    continue;
                }
                for o in [Orientation::Vertical, Orientation::Horizontal] {
                    let fast = lib(strip::strip_pool(&x, n, o))?;
                    let slow = oracle::strip_pool(&x, n, o);
                    let e = fast.max_abs_diff(&slow);
                    if fast.shape() != slow.shape() || e >= 1e-12 {
                        return Err(format!("{h}x{w} n={n} {o:?}: error {e:.3e}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} cases"))
}

/// Perfect reconstruction and energy preservation on `count` random tensors.
pub fn dwt_roundtrip(count: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst64, mut worst32, mut worst_energy) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..count {
        let s = Shape::new(rng.random_range(1..3), rng.random_range(1..4), 2 * rng.random_range(1..9), 2 * rng.random_range(1..9));
        let x = rand_t(s, &mut rng);
        let bands = lib(wavelet::haar_dwt2(&x))?;
        let back = lib(wavelet::haar_idwt2(&bands))?;
        worst64 = worst64.max(back.max_abs_diff(&x));
        let energy: f64 = [&bands.ll, &bands.lh, &bands.hl, &bands.hh].iter().map(|b| b.dot(b)).sum();
        worst_energy = worst_energy.max((energy - x.dot(&x)).abs() / x.dot(&x).max(1e-300));
        let x32 = x.cast::<f32>();
        let back32 = lib(wavelet::haar_dwt2(&x32).and_then(|b| wavelet::haar_idwt2(&b)))?;
        worst32 = worst32.max(back32.max_abs_diff(&x32) as f64);
    }
    if worst64 >= 1e-12 || worst32 >= 1e-6 || worst_energy >= 1e-5 {
        return Err(format!(
            "reconstruction f64 {worst64:.2e}, f32 {worst32:.2e}, energy {worst_energy:.2e}"
        ));
    }
    Ok(format!("{count} tensors, f64 {worst64:.1e}, f32 {worst32:.1e}, energy {worst_energy:.1e}"))
}

fn probe<'t>(y: &Var<'t, f64>, rng_seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = y.tape().constant(rand_t(y.shape(), &mut rng));
    Ok(autodiff::sum(&autodiff::mul(y, &w)?))
}

fn grad_ok(name: &str, r: Result<GradCheck>) -> std::result::Result<f64, String> {
    let r = lib(r)?;
    if r.passes(GRAD_TOL) {
        Ok(r.max_rel_err)
    } else {
        Err(format!("{name}: relative error {:.3e} at {:?}", r.max_rel_err, r.worst))
    }
}

/// Finite-difference checks of the layer ops and both blocks.
pub fn gradient_ops(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let x = rand_t(Shape::new(2, 4, 8, 8), &mut rng);
    let w = rand_t(Shape::new(4, 2, 3, 3), &mut rng);
    let b = rand_t(Shape::new(1, 4, 1, 1), &mut rng);
    let geom = ConvGeometry::new(2, 1, 2);
    worst = worst.max(grad_ok(
        "conv2d",
        gradcheck::check(&[x.clone(), w, b], |_, v| probe(&autodiff::conv2d(&v[0], &v[1], Some(&v[2]), geom)?, 1), DEFAULT_STEP, Some((60, seed))),
    )?);
    let wt = rand_t(Shape::new(4, 2, 4, 4), &mut rng);
    worst = worst.max(grad_ok(
        "conv_transpose2d",
        gradcheck::check(&[x.clone(), wt], |_, v| probe(&autodiff::conv_transpose2d(&v[0], &v[1], None, 2, 1)?, 2), DEFAULT_STEP, Some((60, seed))),
    )?);
    worst = worst.max(grad_ok(
        "pointwise",
        gradcheck::check(
            std::slice::from_ref(&x),
            |_, v| {
                let a = autodiff::leaky_relu(&v[0], 0.2);
                let s = autodiff::sigmoid(&v[0]);
                let m = autodiff::mul(&a, &s)?;
                probe(&autodiff::resize_double(&autodiff::resize_half(&m)?)?, 3)
            },
            DEFAULT_STEP,
            Some((60, seed)),
        ),
    )?);
    worst = worst.max(grad_ok(
        "fft",
        gradcheck::check(
            std::slice::from_ref(&x),
            |_, v| {
                let re = autodiff::abs(&autodiff::fft2_re(&v[0]));
                let im = autodiff::abs(&autodiff::fft2_im(&v[0]));
                Ok(autodiff::add(&autodiff::sum(&re), &autodiff::sum(&im))?)
            },
            DEFAULT_STEP,
            Some((60, seed)),
        ),
    )?);

    let opts = ForwardOptions { mode: NormMode::Train, slope: 0.2, use_bn: true, bypass_activation: false };
    let mut layout = Layout::new();
    blocks::msfe::declare_msfe(&mut layout, "m", 3, 4);
    blocks::msfe::declare_fuse(&mut layout, "f", 4, true);
    blocks::febp::declare_febp(&mut layout, "p", [4, 8, 16], 4);
    let params = layout.materialize::<f64>(&mut rng);
    let img = rand_t(Shape::new(2, 3, 16, 16), &mut rng);
    let prev = rand_t(Shape::new(2, 4, 16, 16), &mut rng);
    worst = worst.max(grad_ok(
        "msfe",
        gradcheck::check_model(
            &params,
            opts,
            |ctx| {
                let t = ctx.tape();
                let m = blocks::msfe_forward(ctx, &t.constant(img.clone()), "m")?;
                probe(&blocks::msfe_fuse(ctx, &m, Some(&t.constant(prev.clone())), "f")?, 4)
            },
            DEFAULT_STEP,
            Some((40, seed)),
        ),
    )?);
    let scales = [
        rand_t(Shape::new(1, 4, 16, 16), &mut rng),
        rand_t(Shape::new(1, 8, 8, 8), &mut rng),
        rand_t(Shape::new(1, 16, 4, 4), &mut rng),
    ];
    worst = worst.max(grad_ok(
        "febp",
        gradcheck::check_model(
            &params,
            opts,
            |ctx| {
                let [a, b, c] = scales.clone().map(|s| ctx.tape().constant(s));
                probe(&blocks::febp_forward(ctx, &a, &b, &c, FebpLevel::One, "p")?, 5)
            },
            DEFAULT_STEP,
            Some((40, seed)),
        ),
    )?);
    Ok(format!("worst relative error {worst:.2e}"))
}

/// Whole-network loss gradient on a 16×16 batch at `samples` parameters.
pub fn gradient_network(samples: usize, seed: u64) -> Outcome {
    let config = ModelConfig::tiny();
    let params = lib(network::build::<f64>(&config, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blurred = rand_t(Shape::new(2, 3, 16, 16), &mut rng).map(|v| 0.5 + 0.4 * v);
    let sharp = rand_t(Shape::new(2, 3, 16, 16), &mut rng).map(|v| 0.5 + 0.4 * v);
    let s2 = lib(ops::resize_half(&sharp))?;
    let s3 = lib(ops::resize_half(&s2))?;
    let targets = [sharp, s2, s3];
    let worst = grad_ok(
        "network",
        gradcheck::check_model(
            &params,
            ForwardOptions::for_config(&config, NormMode::Train),
            |ctx| {
                let input = ctx.tape().constant(blurred.clone());
                let out = network::forward(ctx, &config, &input)?;
                Ok(total_loss(&out.scales, &targets, 0.1, SpectralNorm::ReIm)?.0)
            },
            DEFAULT_STEP,
            Some((samples, seed)),
        ),
    )?;
    Ok(format!("{samples} parameters, worst relative error {worst:.2e}"))
}

fn timed(name: &'static str, f: impl FnOnce() -> Outcome) -> SuiteResult {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    match outcome {
        Ok(detail) => SuiteResult { name, passed: true, detail, elapsed },
        Err(detail) => SuiteResult { name, passed: false, detail, elapsed },
    }
}

/// Runs every suite of `level`, calling `report` as each one finishes.
pub fn run(level: Level, hooks: Hooks, mut report: impl FnMut(&SuiteResult)) -> Vec<SuiteResult> {
    let full = level == Level::Full;
    let mut results = Vec::new();
    let mut push = |r: SuiteResult| {
        report(&r);
        results.push(r);
    };
    push(timed("dwt-roundtrip", || dwt_roundtrip(if full { 100 } else { 20 }, 11)));
    push(timed("strip-pool-oracle", || {
        strip_oracle(if full { &[7, 8, 12, 16] } else { &[7, 8] }, 12)
    }));
    push(timed("conv-oracle", || conv_oracle(if full { 20 } else { 8 }, 13, hooks)));
    push(timed("dft-oracle", || {
        dft_oracle(if full { &[(8, 8), (16, 16), (6, 10), (12, 7)] } else { &[(8, 8), (6, 10)] }, 14)
    }));
    push(timed("gradient-ops", || gradient_ops(15)));
    if full {
        push(timed("gradient-network", || gradient_network(50, 16)));
    }
    results
}
