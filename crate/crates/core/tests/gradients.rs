//! Finite-difference checks of every differentiable op, both attention-style
//! blocks and the whole network loss.

use mfenet::autodiff::{self, Tape, Var};
use mfenet::blocks::{self, strip, FebpLevel, Orientation};
use mfenet::gradcheck::{check, check_model, GradCheck, DEFAULT_STEP};
use mfenet::network::{self, ModelConfig};
use mfenet::objectives::{total_loss, SpectralNorm};
use mfenet::ops::{ConvGeometry, NormMode, RunningStats};
use mfenet::params::{Ctx, ForwardOptions, Layout, ModelParams};
use mfenet::wavelet;
use mfenet::{Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_t(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe<'t>(y: &Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = y.tape().constant(rand_t(y.shape(), seed));
    Ok(autodiff::sum(&autodiff::mul(y, &w)?))
}

fn assert_ok(name: &str, r: GradCheck) {
    assert!(r.passes(TOL), "{name}: {r:?}");
}

#[test]
fn conv2d_all_inputs() {
    for (geom, groups, k, c_in, c_out) in [
        (ConvGeometry::new(1, 1, 1), 1, (3, 3), 2, 3),
        (ConvGeometry::new(2, 1, 1), 1, (3, 3), 2, 2),
        (ConvGeometry::new(1, 2, 4), 4, (5, 5), 4, 4),
        (ConvGeometry { stride: 1, pad_h: 0, pad_w: 1, groups: 1 }, 1, (1, 3), 2, 2),
    ] {
        let x = rand_t(Shape::new(2, c_in, 6, 5), 1);
        let w = rand_t(Shape::new(c_out, c_in / groups, k.0, k.1), 2);
        let b = rand_t(Shape::new(1, c_out, 1, 1), 3);
        let r = check(
            &[x, w, b],
            |_, v| probe(&autodiff::conv2d(&v[0], &v[1], Some(&v[2]), geom)?, 4),
            DEFAULT_STEP,
            None,
        )
        .unwrap();
        assert_ok("conv2d", r);
    }
}

#[test]
fn conv_transpose2d_all_inputs() {
    let x = rand_t(Shape::new(2, 3, 4, 3), 5);
    let w = rand_t(Shape::new(3, 2, 4, 4), 6);
    let b = rand_t(Shape::new(1, 2, 1, 1), 7);
    let r = check(
        &[x, w, b],
        |_, v| probe(&autodiff::conv_transpose2d(&v[0], &v[1], Some(&v[2]), 2, 1)?, 8),
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert_ok("conv_transpose2d", r);
}

#[test]
fn pointwise_ops() {
    let x = rand_t(Shape::new(2, 2, 3, 3), 9);
    let y = rand_t(Shape::new(2, 2, 3, 3), 10);
    assert_ok(
        "leaky_relu",
        check(std::slice::from_ref(&x), |_, v| probe(&autodiff::leaky_relu(&v[0], 0.2), 11), DEFAULT_STEP, None)
            .unwrap(),
    );
    assert_ok(
        "sigmoid",
        check(std::slice::from_ref(&x), |_, v| probe(&autodiff::sigmoid(&v[0]), 12), DEFAULT_STEP, None).unwrap(),
    );
    assert_ok(
        "abs",
        check(std::slice::from_ref(&x), |_, v| probe(&autodiff::abs(&v[0]), 13), DEFAULT_STEP, None).unwrap(),
    );
    assert_ok(
        "mul/add/sub/scale",
        check(
            &[x.clone(), y.clone()],
            |_, v| {
                let a = autodiff::mul(&v[0], &v[1])?;
                let b = autodiff::sub(&a, &autodiff::scale(&v[1], 0.7))?;
                probe(&autodiff::add(&b, &v[0])?, 14)
            },
            DEFAULT_STEP,
            None,
        )
        .unwrap(),
    );
    assert_ok(
        "concat/reshape",
        check(
            &[x, y],
            |_, v| {
                let c = autodiff::concat_channels(&[&v[0], &v[1]])?;
                probe(&autodiff::reshape(&c, Shape::new(2, 1, 4, 9))?, 15)
            },
            DEFAULT_STEP,
            None,
        )
        .unwrap(),
    );
}

#[test]
fn resampling_ops() {
    let x = rand_t(Shape::new(1, 2, 4, 6), 16);
    assert_ok(
        "resize_half",
        check(std::slice::from_ref(&x), |_, v| probe(&autodiff::resize_half(&v[0])?, 17), DEFAULT_STEP, None)
            .unwrap(),
    );
    assert_ok(
        "resize_double",
        check(&[x], |_, v| probe(&autodiff::resize_double(&v[0])?, 18), DEFAULT_STEP, None).unwrap(),
    );
}

#[test]
fn batch_norm_both_modes() {
    let x = rand_t(Shape::new(3, 2, 3, 2), 19);
    let g = rand_t(Shape::new(1, 2, 1, 1), 20);
    let b = rand_t(Shape::new(1, 2, 1, 1), 21);
    let running = RunningStats {
        mean: Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.1, -0.2]).unwrap(),
        var: Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.5, 1.5]).unwrap(),
    };
    let r = check(
        &[x.clone(), g.clone(), b.clone()],
        |_, v| probe(&autodiff::batch_norm_train(&v[0], &v[1], &v[2], &running, 1e-5, 0.1)?.0, 22),
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert_ok("batch_norm_train", r);
    let r = check(
        &[x, g, b],
        |_, v| probe(&autodiff::batch_norm_eval(&v[0], &v[1], &v[2], &running, 1e-5)?, 23),
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert_ok("batch_norm_eval", r);
}

#[test]
fn fft_parts() {
    for (h, w) in [(4, 4), (3, 5), (8, 2)] {
        let x = rand_t(Shape::new(1, 2, h, w), 24);
        assert_ok(
            "fft2_re",
            check(std::slice::from_ref(&x), |_, v| probe(&autodiff::fft2_re(&v[0]), 25), DEFAULT_STEP, None)
                .unwrap(),
        );
        assert_ok(
            "fft2_im",
            check(&[x], |_, v| probe(&autodiff::fft2_im(&v[0]), 26), DEFAULT_STEP, None).unwrap(),
        );
    }
}

#[test]
fn wavelet_and_strip_ops() {
    let x = rand_t(Shape::new(1, 2, 4, 6), 27);
    assert_ok(
        "dwt/idwt",
        check(
            std::slice::from_ref(&x),
            |_, v| {
                let bands = wavelet::dwt_var(&v[0])?;
                let scaled = bands.try_map(|band, b| -> Result<_> {
                    Ok(autodiff::scale(&b, 1.0 + band as usize as f64))
                })?;
                probe(&wavelet::idwt_var(&scaled)?, 28)
            },
            DEFAULT_STEP,
            None,
        )
        .unwrap(),
    );
    let x = rand_t(Shape::new(1, 2, 7, 8), 29);
    for n in strip::STRIP_SIZES {
        for o in [Orientation::Vertical, Orientation::Horizontal] {
            let r = check(
                std::slice::from_ref(&x),
                |_, v| {
                    let p = strip::strip_pool_var(&v[0], n, o)?;
                    let p = autodiff::mul(&p, &p)?;
                    probe(&strip::strip_expand_var(&p, o, 7, 8)?, 30)
                },
                DEFAULT_STEP,
                None,
            )
            .unwrap();
            assert_ok("strip pool/expand", r);
        }
    }
}

fn f64_opts(mode: NormMode) -> ForwardOptions<f64> {
    ForwardOptions { mode, slope: 0.2, use_bn: true, bypass_activation: false }
}

fn block_params(declare: impl FnOnce(&mut Layout), seed: u64) -> ModelParams<f64> {
    let mut layout = Layout::new();
    declare(&mut layout);
    // Non-zero biases and shifts so every path carries signal.
    let mut p = layout.materialize::<f64>(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    p
}

#[test]
fn msfe_block_params_and_input() {
    let c = 4;
    let params = block_params(
        |l| {
            blocks::msfe::declare_msfe(l, "m", 3, c);
            blocks::msfe::declare_fuse(l, "f", c, true);
        },
        31,
    );
    let b = rand_t(Shape::new(2, 3, 8, 8), 32);
    let prev = rand_t(Shape::new(2, c, 8, 8), 33);
    for mode in [NormMode::Train, NormMode::Eval] {
        let r = check_model(
            &params,
            f64_opts(mode),
            |ctx| {
                let t = ctx.tape();
                let m = blocks::msfe_forward(ctx, &t.constant(b.clone()), "m")?;
                let s = blocks::msfe_fuse(ctx, &m, Some(&t.constant(prev.clone())), "f")?;
                probe(&s, 34)
            },
            DEFAULT_STEP,
            Some((150, 35)),
        )
        .unwrap();
        assert_ok("msfe params", r);
    }
    let r = check(
        &[b, prev],
        |t, v| {
            let ctx = Ctx::new(t, &params, f64_opts(NormMode::Train));
            let m = blocks::msfe_forward(&ctx, &v[0], "m")?;
            probe(&blocks::msfe_fuse(&ctx, &m, Some(&v[1]), "f")?, 36)
        },
        DEFAULT_STEP,
        Some((80, 37)),
    )
    .unwrap();
    assert_ok("msfe input", r);
}

#[test]
fn febp_block_params_and_input() {
    let widths = [4, 8, 16];
    let c = 4;
    let params = block_params(|l| blocks::febp::declare_febp(l, "p", widths, c), 38);
    // The level-two map is 8×8, the smallest that fits seven strips.
    let s1 = rand_t(Shape::new(1, widths[0], 16, 16), 39);
    let s2 = rand_t(Shape::new(1, widths[1], 8, 8), 40);
    let s3 = rand_t(Shape::new(1, widths[2], 4, 4), 41);
    let r = check_model(
        &params,
        f64_opts(NormMode::Train),
        |ctx| {
            let t = ctx.tape();
            let [a, b, c] = [&s1, &s2, &s3].map(|x| t.constant(x.clone()));
            probe(&blocks::febp_forward(ctx, &a, &b, &c, FebpLevel::One, "p")?, 42)
        },
        DEFAULT_STEP,
        Some((200, 43)),
    )
    .unwrap();
    assert_ok("febp params", r);
    for level in [FebpLevel::One, FebpLevel::Two] {
        let r = check(
            &[s1.clone(), s2.clone(), s3.clone()],
            |t, v| {
                let ctx = Ctx::new(t, &params, f64_opts(NormMode::Train));
                probe(&blocks::febp_forward(&ctx, &v[0], &v[1], &v[2], level, "p")?, 44)
            },
            DEFAULT_STEP,
            Some((100, 45)),
        )
        .unwrap();
        assert_ok("febp input", r);
    }
}

#[test]
fn whole_network_loss_on_16x16() {
    let config = ModelConfig::tiny();
    let params = network::build::<f64>(&config, 46).unwrap();
    let blurred = rand_t(Shape::new(2, 3, 16, 16), 47).map(|v| 0.5 + 0.4 * v);
    let sharp = rand_t(Shape::new(2, 3, 16, 16), 48).map(|v| 0.5 + 0.4 * v);
    let targets = [
        sharp.clone(),
        mfenet::ops::resize_half(&sharp).unwrap(),
        mfenet::ops::resize_half(&mfenet::ops::resize_half(&sharp).unwrap()).unwrap(),
    ];
    let r = check_model(
        &params,
        ForwardOptions::for_config(&config, NormMode::Train),
        |ctx| {
            let input = ctx.tape().constant(blurred.clone());
            let out = network::forward(ctx, &config, &input)?;
            Ok(total_loss(&out.scales, &targets, 0.1, SpectralNorm::ReIm)?.0)
        },
        DEFAULT_STEP,
        Some((50, 49)),
    )
    .unwrap();
    assert_eq!(r.checked, 50);
    assert_ok("network", r);
}

#[test]
fn loss_gradients_against_inputs() {
    let tape_free = |norm: SpectralNorm| {
        let preds: Vec<Tensor<f64>> = [8, 4, 2].iter().map(|&s| rand_t(Shape::new(1, 3, s, s), s as u64)).collect();
        let targets: Vec<Tensor<f64>> =
            [8, 4, 2].iter().map(|&s| rand_t(Shape::new(1, 3, s, s), 100 + s as u64)).collect();
        check(&preds, |_: &Tape<f64>, v| Ok(total_loss(v, &targets, 0.1, norm)?.0), DEFAULT_STEP, None).unwrap()
    };
    assert_ok("loss re/im", tape_free(SpectralNorm::ReIm));
    assert_ok("loss magnitude", tape_free(SpectralNorm::Magnitude));
}
