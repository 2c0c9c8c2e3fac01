//! The three-scale encoder/decoder.
//!
//! ```text
//! B1 ──msfe/fuse──► S1 ─res─► E1 ───────────────────────┐ skip1 (FEBP level 1)
//!  │ half            │ down                             │
//! B2 ──msfe/fuse──► S2 ─res─► E2 ────────────────┐ skip2 (FEBP level 2)
//!  │ half            │ down                      │      │
//! B3 ──msfe/fuse──► S3 ─res─► E3 ─res─► D3 ─up─► merge ─res─► D2 ─up─► merge ─res─► D1
//!                                        │head              │head              │head
//!                                        I3                 I2                 I1
//! ```
//!
//! With MS-FE disabled each scale starts from a single 3×3 stem conv whose
//! output is added to the downsampled previous level; with FEBP disabled the
//! skips carry `E1`/`E2` directly.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Tape, Var};
use crate::blocks::{self, febp, msfe, FebpLevel};
use crate::error::{contract, Error, Result};
use crate::ops::{ConvGeometry, NormMode};
use crate::params::{Ctx, ForwardOptions, Layout, ModelParams};
use crate::tensor::{Real, Shape, Tensor};

pub const SCALES: usize = 3;
const IMAGE_CHANNELS: usize = 3;
/// Smallest accepted height and width: the quarter scale must still hold
/// the widest strip-pooling grid at the middle level.
pub const MIN_INPUT_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel width at scale 1; doubles per scale.
    pub c_base: usize,
    /// Residual blocks per encoder and per decoder level.
    pub n_resblocks: usize,
    pub leaky_slope: f64,
    pub use_msfe: bool,
    pub use_febp: bool,
    /// Emit `B_k + O_k` instead of `O_k`.
    pub residual_output: bool,
    /// When off, every batch norm is the identity.
    pub use_bn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_base: 32,
            n_resblocks: 8,
            leaky_slope: 0.2,
            use_msfe: true,
            use_febp: true,
            residual_output: true,
            use_bn: true,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            c_base: 8,
            n_resblocks: 1,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_base < 4 || self.c_base % 2 != 0 {
            return Err(Error::Config(format!(
                "c_base must be even and at least 4, got {}",
                self.c_base
            )));
        }
        if self.n_resblocks < 1 {
            return Err(Error::Config("n_resblocks must be at least 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; SCALES] {
        [self.c_base, 2 * self.c_base, 4 * self.c_base]
    }

    /// Canonical `key=value` lines, in fixed order.
    pub fn to_canonical(&self) -> String {
        format!(
            "c_base={}\nn_resblocks={}\nleaky_slope={}\nuse_msfe={}\nuse_febp={}\nresidual_output={}\nuse_bn={}\n",
            self.c_base,
            self.n_resblocks,
            self.leaky_slope,
            self.use_msfe,
            self.use_febp,
            self.residual_output,
            self.use_bn
        )
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical())
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let bad = |line: &str| Error::Config(format!("malformed config line {line:?}"));
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            let flag = |v: &str| v.parse::<bool>().map_err(|_| bad(line));
            match k {
                "c_base" => cfg.c_base = v.parse().map_err(|_| bad(line))?,
                "n_resblocks" => cfg.n_resblocks = v.parse().map_err(|_| bad(line))?,
                "leaky_slope" => cfg.leaky_slope = v.parse().map_err(|_| bad(line))?,
                "use_msfe" => cfg.use_msfe = flag(v)?,
                "use_febp" => cfg.use_febp = flag(v)?,
                "residual_output" => cfg.residual_output = flag(v)?,
                "use_bn" => cfg.use_bn = flag(v)?,
                _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every parameter of the model, in a fixed declaration order.
pub fn layout(config: &ModelConfig) -> Layout {
    let mut l = Layout::new();
    let w = config.widths();
    for k in 0..SCALES {
        let enc = format!("enc{}", k + 1);
        if config.use_msfe {
            msfe::declare_msfe(&mut l, &format!("{enc}.msfe"), IMAGE_CHANNELS, w[k]);
            msfe::declare_fuse(&mut l, &format!("{enc}.fuse"), w[k], k > 0);
        } else {
            l.conv(&format!("{enc}.stem"), IMAGE_CHANNELS, w[k], 3, 3, 1);
        }
        if k > 0 {
            l.conv(&format!("{enc}.down"), w[k - 1], w[k], 3, 3, 1);
        }
        for r in 0..config.n_resblocks {
            blocks::declare_resblock(&mut l, &format!("{enc}.res{r}"), w[k]);
        }
    }
    if config.use_febp {
        febp::declare_febp(&mut l, "febp1", w, w[0]);
        febp::declare_febp(&mut l, "febp2", w, w[1]);
    }
    for k in (0..SCALES).rev() {
        let dec = format!("dec{}", k + 1);
        if k < SCALES - 1 {
            l.conv_transpose(&format!("{dec}.up"), w[k + 1], w[k], 4);
            l.conv(&format!("{dec}.merge"), 2 * w[k], w[k], 1, 1, 1);
        }
        for r in 0..config.n_resblocks {
            blocks::declare_resblock(&mut l, &format!("{dec}.res{r}"), w[k]);
        }
        l.conv(&format!("{dec}.head"), w[k], IMAGE_CHANNELS, 3, 3, 1);
    }
    l
}

/// Deterministic initialization: uniform `±1/√fan_in` weights, zero biases,
/// unit batch-norm scale.
pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(layout(config).materialize(&mut rng))
}

/// Exact trainable scalar count.
pub fn count_params(config: &ModelConfig) -> usize {
    layout(config).trainable_count()
}

/// Restored images at full, half and quarter resolution.
pub struct Outputs<'t, T: Real> {
    pub scales: [Var<'t, T>; SCALES],
    /// The blurred input pyramid the outputs were computed from.
    pub inputs: [Var<'t, T>; SCALES],
}

impl<T: Real> ForwardOptions<T> {
    pub fn for_config(config: &ModelConfig, mode: NormMode) -> Self {
        ForwardOptions {
            mode,
            slope: T::of(config.leaky_slope),
            use_bn: config.use_bn,
            bypass_activation: false,
        }
    }
}

fn check_input(s: Shape) -> Result<()> {
    contract!(
        s.c == IMAGE_CHANNELS,
        "network input must have {IMAGE_CHANNELS} channels, got {s}"
    );
    contract!(
        s.h % 8 == 0 && s.w % 8 == 0 && s.h > 0 && s.w > 0,
        "network input height and width must be divisible by 8, got {s}"
    );
    contract!(
        s.h >= MIN_INPUT_SIZE && s.w >= MIN_INPUT_SIZE,
        "network input must be at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, got {s}"
    );
    Ok(())
}

fn resblocks<'t, T: Real>(ctx: &Ctx<'t, '_, T>, x: Var<'t, T>, prefix: &str, n: usize) -> Result<Var<'t, T>> {
    (0..n).try_fold(x, |h, r| blocks::resblock_forward(ctx, &h, &format!("{prefix}.res{r}")))
}

/// Runs the network on a batch `(n, 3, H, W)` bound to `ctx`.
pub fn forward<'t, T: Real>(ctx: &Ctx<'t, '_, T>, config: &ModelConfig, b1: &Var<'t, T>) -> Result<Outputs<'t, T>> {
    check_input(b1.shape())?;
    let b2 = autodiff::resize_half(b1)?;
    let b3 = autodiff::resize_half(&b2)?;
    let inputs = [b1.clone(), b2, b3];
    let n_res = config.n_resblocks;
    let down_geom = ConvGeometry::new(2, 1, 1);

    let mut enc: Vec<Var<'t, T>> = Vec::with_capacity(SCALES);
    for (k, b) in inputs.iter().enumerate() {
        let name = format!("enc{}", k + 1);
        let prev = match k {
            0 => None,
            _ => Some(ctx.conv(&enc[k - 1], &format!("{name}.down"), down_geom)?),
        };
        let s = if config.use_msfe {
            let m = msfe::msfe_forward(ctx, b, &format!("{name}.msfe"))?;
            msfe::msfe_fuse(ctx, &m, prev.as_ref(), &format!("{name}.fuse"))?
        } else {
            let stem = ctx.conv_same(b, &format!("{name}.stem"), 1)?;
            match prev {
                Some(p) => autodiff::add(&stem, &p)?,
                None => stem,
            }
        };
        enc.push(resblocks(ctx, s, &name, n_res)?);
    }

    let skips = if config.use_febp {
        [
            blocks::febp_forward(ctx, &enc[0], &enc[1], &enc[2], FebpLevel::One, "febp1")?,
            blocks::febp_forward(ctx, &enc[0], &enc[1], &enc[2], FebpLevel::Two, "febp2")?,
        ]
    } else {
        [enc[0].clone(), enc[1].clone()]
    };

    let mut outs: Vec<Var<'t, T>> = Vec::with_capacity(SCALES);
    let mut d = resblocks(ctx, enc[2].clone(), "dec3", n_res)?;
    outs.push(ctx.conv_same(&d, "dec3.head", 1)?);
    for k in (0..SCALES - 1).rev() {
        let name = format!("dec{}", k + 1);
        let up = ctx.act(&ctx.conv_transpose(&d, &format!("{name}.up"), 2, 1)?);
        let cat = autodiff::concat_channels(&[&up, &skips[k]])?;
        let merged = ctx.conv(&cat, &format!("{name}.merge"), ConvGeometry::new(1, 0, 1))?;
        d = resblocks(ctx, merged, &name, n_res)?;
        outs.push(ctx.conv_same(&d, &format!("{name}.head"), 1)?);
    }
    outs.reverse();

    let scales = if config.residual_output {
        let v: Vec<_> = outs
            .iter()
            .zip(&inputs)
            .map(|(o, b)| autodiff::add(b, o))
            .collect::<Result<_>>()?;
        v.try_into().unwrap_or_else(|_| unreachable!())
    } else {
        outs.try_into().unwrap_or_else(|_| unreachable!())
    };
    Ok(Outputs { scales, inputs })
}

/// Forward-only inference on a batch; batch norms use running statistics.
pub fn infer<T: Real>(params: &ModelParams<T>, config: &ModelConfig, input: &Tensor<T>) -> Result<[Tensor<T>; SCALES]> {
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, params, ForwardOptions::for_config(config, NormMode::Eval));
    let b1 = tape.constant(input.clone());
    let out = forward(&ctx, config, &b1)?;
    Ok(out.scales.map(|v| v.value().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_double_per_scale() {
        let cfg = ModelConfig { c_base: 32, ..ModelConfig::default() };
        assert_eq!(cfg.widths(), [32, 64, 128]);
    }

    #[test]
    fn config_roundtrips_through_canonical_text() {
        let cfg = ModelConfig { c_base: 12, n_resblocks: 3, use_febp: false, leaky_slope: 0.1, ..ModelConfig::default() };
        let back: ModelConfig = cfg.to_canonical().parse().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            ModelConfig { c_base: 6, n_resblocks: 0, ..ModelConfig::tiny() },
            ModelConfig { c_base: 2, ..ModelConfig::tiny() },
            ModelConfig { c_base: 9, ..ModelConfig::tiny() },
            ModelConfig { leaky_slope: 1.5, ..ModelConfig::tiny() },
        ] {
            assert!(build::<f32>(&cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn name_set_is_unique() {
        let l = layout(&ModelConfig::tiny());
        let mut names: Vec<_> = l.decls().iter().map(|d| d.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
