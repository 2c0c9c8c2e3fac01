//! Randomized invariants of the numeric core, data pipeline and persistence.

use mfenet::autodiff::Tape;
use mfenet::blocks::{self, strip, FebpLevel, Orientation};
use mfenet::data::{make_motion_kernel, pyramid, Image};
use mfenet::metrics::{self, SsimMode};
use mfenet::objectives::{content_loss, msfr_loss, spectral_l1, SpectralNorm};
use mfenet::ops::{self, ConvGeometry, NormMode};
use mfenet::params::{Ctx, ForwardOptions, Layout, ModelParams};
use mfenet::trainer::{adam_step, pad_for_network, AdamState, Checkpoint, TrainConfig};
use mfenet::network::{self, ModelConfig};
use mfenet::{oracle, wavelet, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn unit_t(shape: Shape, seed: u64) -> Tensor<f64> {
    rand_t(shape, seed).map(|v| 0.5 + 0.5 * v)
}

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = b.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn depthwise_then_pointwise_equals_factored_dense(
        c in 1usize..5, co in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5]),
        h in 5usize..10, w in 5usize..10, seed in any::<u64>(),
    ) {
        let x = rand_t(Shape::new(2, c, h, w), seed);
        let dw = rand_t(Shape::new(c, 1, k, k), seed ^ 1);
        let pw = rand_t(Shape::new(co, c, 1, 1), seed ^ 2);
        let mid = ops::conv2d(&x, &dw, None, ConvGeometry::same(k, k, c)).unwrap();
        let got = ops::conv2d(&mid, &pw, None, ConvGeometry::new(1, 0, 1)).unwrap();
        let dense = Tensor::from_fn(Shape::new(co, c, k, k), |[o, i, ky, kx]| pw.at(o, i, 0, 0) * dw.at(i, 0, ky, kx));
        let want = ops::conv2d(&x, &dense, None, ConvGeometry::same(k, k, 1)).unwrap();
        prop_assert!(rel(&got, &want) < 1e-6);
    }

    #[test]
    fn conv_and_transpose_are_adjoint(
        ci in 1usize..4, co in 1usize..4, k in 1usize..5, stride in 1usize..3,
        oh in 1usize..6, ow in 1usize..6, pad_seed in any::<usize>(), seed in any::<u64>(),
    ) {
        let pad = pad_seed % k.div_ceil(2);
        // Input sizes for which the forward conv covers every row exactly.
        let (h, w) = ((oh - 1) * stride + k - 2 * pad, (ow - 1) * stride + k - 2 * pad);
        prop_assume!(h > 0 && w > 0);
        let x = rand_t(Shape::new(1, ci, h, w), seed);
        let wt = rand_t(Shape::new(co, ci, k, k), seed ^ 3);
        let y = rand_t(Shape::new(1, co, oh, ow), seed ^ 4);
        let ax = ops::conv2d(&x, &wt, None, ConvGeometry::new(stride, pad, 1)).unwrap();
        prop_assert_eq!(ax.shape(), y.shape());
        let aty = ops::conv_transpose2d(&y, &wt, None, stride, pad).unwrap();
        prop_assert_eq!(aty.shape(), x.shape());
        let (l, r) = (ax.dot(&y), x.dot(&aty));
        prop_assert!((l - r).abs() <= 1e-6 * l.abs().max(r.abs()).max(1.0), "{} vs {}", l, r);
    }

    #[test]
    fn conv_is_bitwise_deterministic(seed in any::<u64>()) {
        let x = rand_t(Shape::new(2, 4, 9, 7), seed).cast::<f32>();
        let w = rand_t(Shape::new(6, 2, 3, 3), seed ^ 5).cast::<f32>();
        let g = ConvGeometry::new(2, 1, 2);
        prop_assert_eq!(ops::conv2d(&x, &w, None, g).unwrap(), ops::conv2d(&x, &w, None, g).unwrap());
    }

    #[test]
    fn fft_is_linear(h in 1usize..12, w in 1usize..12, a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        let s = Shape::new(1, 2, h, w);
        let (x, y) = (rand_t(s, seed), rand_t(s, seed ^ 6));
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let (mr, mi) = ops::fft2(&mix);
        let ((xr, xi), (yr, yi)) = (ops::fft2(&x), ops::fft2(&y));
        let lin = |p: &Tensor<f64>, q: &Tensor<f64>| p.zip_map(q, |u, v| a * u + b * v).unwrap();
        prop_assert!(mr.max_abs_diff(&lin(&xr, &yr)) < 1e-5 * (h * w) as f64);
        prop_assert!(mi.max_abs_diff(&lin(&xi, &yi)) < 1e-5 * (h * w) as f64);
    }

    #[test]
    fn dwt_reconstructs_and_is_linear(h in 1usize..9, w in 1usize..9, a in -2.0f64..2.0, seed in any::<u64>()) {
        let s = Shape::new(1, 3, 2 * h, 2 * w);
        let (x, y) = (rand_t(s, seed), rand_t(s, seed ^ 7));
        let bx = wavelet::haar_dwt2(&x).unwrap();
        prop_assert!(wavelet::haar_idwt2(&bx).unwrap().max_abs_diff(&x) < 1e-12);
        let mix = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let bm = wavelet::haar_dwt2(&mix).unwrap();
        let by = wavelet::haar_dwt2(&y).unwrap();
        for band in wavelet::Band::ALL {
            let want = bx.get(band).zip_map(by.get(band), |p, q| a * p + q).unwrap();
            prop_assert!(bm.get(band).max_abs_diff(&want) < 1e-12);
        }
        // Top-left block against the closed-form 2×2 analysis.
        let (ll, lh, hl, hh) = oracle::haar_block(x.at(0, 0, 0, 0), x.at(0, 0, 0, 1), x.at(0, 0, 1, 0), x.at(0, 0, 1, 1));
        prop_assert!((bx.ll.at(0, 0, 0, 0) - ll).abs() < 1e-12);
        prop_assert!((bx.lh.at(0, 0, 0, 0) - lh).abs() < 1e-12);
        prop_assert!((bx.hl.at(0, 0, 0, 0) - hl).abs() < 1e-12);
        prop_assert!((bx.hh.at(0, 0, 0, 0) - hh).abs() < 1e-12);
    }

    #[test]
    fn strip_windows_tile_the_axis(len in 1usize..64, n_seed in any::<usize>()) {
        let n = 1 + n_seed % len;
        let (stride, window) = strip::strip_geometry(len, n);
        prop_assert_eq!((n - 1) * stride + window, len);
    }

    #[test]
    fn strip_pool_of_constant_is_constant(h in 7usize..17, w in 7usize..17, v in -3.0f64..3.0) {
        let x = Tensor::full(Shape::new(1, 2, h, w), v);
        for n in strip::STRIP_SIZES {
            for o in [Orientation::Vertical, Orientation::Horizontal] {
                let y = strip::strip_pool(&x, n, o).unwrap();
                prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_equality(seed in any::<u64>()) {
        let tape = Tape::<f64>::new();
        let targets: Vec<Tensor<f64>> = [8, 4, 2].iter().map(|&s| unit_t(Shape::new(1, 3, s, s), seed ^ s as u64)).collect();
        let preds: Vec<_> = targets.iter().map(|t| tape.constant(unit_t(t.shape(), seed ^ 99))).collect();
        let same: Vec<_> = targets.iter().map(|t| tape.constant(t.clone())).collect();
        for norm in [SpectralNorm::ReIm, SpectralNorm::Magnitude] {
            prop_assert!(content_loss(&preds, &targets).unwrap().item() > 0.0);
            prop_assert!(msfr_loss(&preds, &targets, norm).unwrap().item() > 0.0);
            prop_assert_eq!(content_loss(&same, &targets).unwrap().item(), 0.0);
            prop_assert!(msfr_loss(&same, &targets, norm).unwrap().item().abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_l1_matches_naive_dft(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let s = Shape::new(1, 3, h, w);
        let (p, t) = (unit_t(s, seed), unit_t(s, seed ^ 8));
        let d = p.zip_map(&t, |a, b| a - b).unwrap();
        let (re, im) = oracle::dft2(&d);
        let naive: f64 = re.data().iter().zip(im.data()).map(|(r, i)| r.abs() + i.abs()).sum::<f64>() / s.numel() as f64;
        let fast = spectral_l1(&p, &t, SpectralNorm::ReIm).unwrap();
        prop_assert!((fast - naive).abs() <= 1e-4 * naive.max(1e-12));
    }

    #[test]
    fn ssim_is_bounded_and_one_only_on_identity(seed in any::<u64>(), amp in 0.01f64..1.0) {
        let s = Shape::new(1, 3, 20, 20);
        let a = unit_t(s, seed);
        let b = a.zip_map(&rand_t(s, seed ^ 9), |p, q| (p + amp * q).clamp(0.0, 1.0)).unwrap();
        for mode in [SsimMode::Global, SsimMode::Windowed] {
            let v = metrics::ssim(&a, &b, 1.0, mode).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
            prop_assert!(v < 1.0 - 1e-9);
            prop_assert!((metrics::ssim(&a, &a, 1.0, mode).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pyramid_levels_are_mean_pooled(k in 1usize..4, seed in any::<u64>()) {
        let x = unit_t(Shape::new(2, 3, 8 * k, 16), seed).cast::<f32>();
        let [l1, l2, l3] = pyramid(x.clone()).unwrap();
        prop_assert_eq!(&l1, &x);
        prop_assert_eq!(l2.clone(), ops::resize_half(&l1).unwrap());
        prop_assert_eq!(l3, ops::resize_half(&l2).unwrap());
    }

    #[test]
    fn adam_keeps_parameters_finite(seed in any::<u64>(), scale in -30.0f64..30.0, lr in 1e-6f64..1.0) {
        let shape = Shape::new(1, 2, 3, 3);
        let mut params = ModelParams::new();
        params.insert("w.weight".into(), rand_t(shape, seed).cast::<f32>());
        let mut grads = ModelParams::new();
        let g = 10f64.powf(scale / 3.0);
        grads.insert("w.weight".into(), rand_t(shape, seed ^ 10).map(|v| v * g).cast::<f32>());
        let mut state = AdamState::zeros_like(&params);
        for t in 1..=3 {
            adam_step(&mut params, &grads, &mut state, t, lr, &TrainConfig::default()).unwrap();
        }
        prop_assert!(params.get("w.weight").unwrap().all_finite());
    }

    #[test]
    fn motion_kernels_are_normalized(length in 1.0f64..15.0, angle in 0.0f64..180.0) {
        let k = make_motion_kernel(length, angle);
        prop_assert!(k.taps.iter().all(|&t| t >= 0.0));
        prop_assert!((k.taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(k.size % 2, 1);
    }

    #[test]
    fn p6_roundtrip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap();
        let back = Image::decode_p6(&img.encode_p6()).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(Image::from_tensor(&img.to_tensor::<f32>()).unwrap(), img);
    }

    #[test]
    fn inference_padding_is_cropped_back(h in 1usize..40, w in 1usize..40, seed in any::<u64>()) {
        let x = unit_t(Shape::new(1, 3, h, w), seed).cast::<f32>();
        let p = pad_for_network(&x);
        let ps = p.shape();
        prop_assert!(ps.h % 8 == 0 && ps.w % 8 == 0 && ps.h >= 16 && ps.w >= 16);
        prop_assert!(ps.h - h < 16 && ps.w - w < 16);
        prop_assert_eq!(p.crop(0, 0, h, w).unwrap(), x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn febp_preserves_the_fused_shape(c in 2usize..6, k in 2usize..4, seed in any::<u64>()) {
        let widths = [c, 2 * c, 4 * c];
        let mut layout = Layout::new();
        blocks::febp::declare_febp(&mut layout, "p", widths, c);
        let params = layout.materialize::<f64>(&mut ChaCha8Rng::seed_from_u64(seed));
        let tape = Tape::<f64>::new();
        let opts = ForwardOptions { mode: NormMode::Train, slope: 0.2, use_bn: true, bypass_activation: false };
        let ctx = Ctx::new(&tape, &params, opts);
        let side = 8 * k;
        let s1 = tape.constant(rand_t(Shape::new(1, c, side, side), seed));
        let s2 = tape.constant(rand_t(Shape::new(1, 2 * c, side / 2, side / 2), seed ^ 1));
        let s3 = tape.constant(rand_t(Shape::new(1, 4 * c, side / 4, side / 4), seed ^ 2));
        for (level, want) in [(FebpLevel::One, side), (FebpLevel::Two, side / 2)] {
            let fm = blocks::febp::fuse_scales(&ctx, &s1, &s2, &s3, level, "p").unwrap();
            prop_assert_eq!(fm.shape(), Shape::new(1, c, want, want));
            let out = blocks::febp_forward(&ctx, &s1, &s2, &s3, level, "p").unwrap();
            prop_assert_eq!(out.shape(), fm.shape());
        }
    }

    #[test]
    fn pass_through_frequency_branch_is_identity(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut layout = Layout::new();
        blocks::febp::declare_febp(&mut layout, "p", [c, c, c], c);
        let mut params = layout.materialize::<f64>(&mut ChaCha8Rng::seed_from_u64(seed));
        // Centre-tap identity kernels, zero biases, no activation.
        for band in wavelet::Band::ALL {
            for conv in ["conv1", "conv2"] {
                let name = format!("p.wave_{}.{conv}", band.name());
                *params.get_mut(&format!("{name}.weight")).unwrap() =
                    Tensor::from_fn(Shape::new(c, c, 3, 3), |[o, i, y, x]| if o == i && y == 1 && x == 1 { 1.0 } else { 0.0 });
                params.get_mut(&format!("{name}.bias")).unwrap().data_mut().fill(0.0);
            }
        }
        let tape = Tape::<f64>::new();
        let opts = ForwardOptions { mode: NormMode::Eval, slope: 0.2, use_bn: true, bypass_activation: true };
        let ctx = Ctx::new(&tape, &params, opts);
        let x = rand_t(Shape::new(2, c, 2 * h, 2 * w), seed);
        let y = blocks::freq_branch(&ctx, &tape.constant(x.clone()), "p").unwrap();
        prop_assert!(y.value().max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn forward_is_deterministic_and_scales_match(seed in any::<u64>()) {
        let config = ModelConfig { c_base: 4, ..ModelConfig::tiny() };
        let params = network::build::<f32>(&config, seed).unwrap();
        let x = unit_t(Shape::new(1, 3, 16, 24), seed).cast::<f32>();
        let a = network::infer(&params, &config, &x).unwrap();
        let b = network::infer(&params, &config, &x).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(ops::resize_half(&a[0]).unwrap().shape(), a[1].shape());
        prop_assert_eq!(ops::resize_half(&a[1]).unwrap().shape(), a[2].shape());
    }

    #[test]
    fn checkpoint_bytes_roundtrip(seed in any::<u64>(), msfe in any::<bool>(), febp in any::<bool>()) {
        let config = ModelConfig { c_base: 4, use_msfe: msfe, use_febp: febp, ..ModelConfig::tiny() };
        let params = network::build::<f32>(&config, seed).unwrap();
        let ckpt = Checkpoint { config, params, training: None };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let s = Shape::new(1, 3, 32, 32);
    let clean = unit_t(s, 1);
    let noise = rand_t(s, 2);
    let psnrs: Vec<f64> = [0.01, 0.02, 0.04, 0.08, 0.16]
        .iter()
        .map(|&a| metrics::psnr(&clean, &clean.zip_map(&noise, |c, n| c + a * n).unwrap(), 1.0).unwrap())
        .collect();
    assert!(psnrs.windows(2).all(|p| p[1] < p[0]), "{psnrs:?}");
}

#[test]
fn vif_falls_as_blur_grows() {
    let img = Tensor::from_fn(Shape::new(1, 3, 48, 48), |[_, c, y, x]| {
        (((x / 3 + y / 5 + c) % 2) as f64 * 0.6 + 0.2 + 0.1 * ((x * y) as f64).sin()).clamp(0.0, 1.0)
    });
    let vifs: Vec<f64> = [1, 2, 3].iter().map(|&r| metrics::vifp(&img, &metrics::box_blur(&img, r), 1.0).unwrap()).collect();
    assert!((metrics::vifp(&img, &img, 1.0).unwrap() - 1.0).abs() < 1e-9);
    assert!(vifs.windows(2).all(|p| p[1] < p[0]), "{vifs:?}");
}
