//! Frequency-enhanced blur perception.
//!
//! Fuses the three encoder scales at one level, then weights the fused map
//! with a sigmoid mask computed from two branches: strip pooling in both
//! orientations at four strip counts, and per-sub-band refinement inside a
//! Haar transform.

use crate::autodiff::{self, Var};
use crate::blocks::strip::{strip_expand_var, strip_pool_var, Orientation, STRIP_SIZES};
use crate::error::{contract, Result};
use crate::ops::ConvGeometry;
use crate::params::{Ctx, Layout};
use crate::tensor::{Real, Shape};
use crate::wavelet::{dwt_var, idwt_var, Band};

/// Which encoder level the block serves; selects how the scales are resampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FebpLevel {
    /// Everything brought to scale 1.
    One,
    /// Everything brought to scale 2.
    Two,
}

pub fn declare_febp(layout: &mut Layout, prefix: &str, widths: [usize; 3], c: usize) {
    let total: usize = widths.iter().sum();
    layout.conv(&format!("{prefix}.fuse3"), total, c, 3, 3, 1);
    layout.conv(&format!("{prefix}.fuse1"), c, c, 1, 1, 1);
    for n in STRIP_SIZES {
        if n == 1 {
            // 1-D kernel along the strip's long axis.
            layout.conv(&format!("{prefix}.strip1"), c, c, 1, 3, 1);
        } else {
            layout.conv(&format!("{prefix}.strip{n}"), c, c, 3, 3, 1);
        }
    }
    layout.fout(&format!("{prefix}.blur_out"), STRIP_SIZES.len() * c, c);
    for band in Band::ALL {
        layout.fout(&format!("{prefix}.wave_{}", band.name()), c, c);
    }
    layout.fout(&format!("{prefix}.mask"), c, c);
}

/// `FM_k = conv1x1(conv3x3(concat(...)))` with bilinear up / mean-pool down.
pub fn fuse_scales<'t, T: Real>(
    ctx: &Ctx<'t, '_, T>,
    s1: &Var<'t, T>,
    s2: &Var<'t, T>,
    s3: &Var<'t, T>,
    level: FebpLevel,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let (a, b, c) = match level {
        FebpLevel::One => {
            let up2 = autodiff::resize_double(s2)?;
            let up3 = autodiff::resize_double(&autodiff::resize_double(s3)?)?;
            (s1.clone(), up2, up3)
        }
        FebpLevel::Two => {
            let down1 = autodiff::resize_half(s1)?;
            let up3 = autodiff::resize_double(s3)?;
            (down1, s2.clone(), up3)
        }
    };
    for t in [&b, &c] {
        contract!(
            t.shape().h == a.shape().h && t.shape().w == a.shape().w,
            "scale mismatch after resampling: {} vs {}",
            t.shape(),
            a.shape()
        );
    }
    let cat = autodiff::concat_channels(&[&a, &b, &c])?;
    let h = ctx.conv_same(&cat, &format!("{prefix}.fuse3"), 1)?;
    ctx.conv(&h, &format!("{prefix}.fuse1"), ConvGeometry::new(1, 0, 1))
}

/// Strip features `y^n` for one strip count, before the output mapping.
pub fn strip_features<'t, T: Real>(
    ctx: &Ctx<'t, '_, T>,
    fm: &Var<'t, T>,
    n: usize,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let s = fm.shape();
    let name = format!("{prefix}.strip{n}");
    let v = strip_pool_var(fm, n, Orientation::Vertical)?;
    let h = strip_pool_var(fm, n, Orientation::Horizontal)?;
    let (v, h) = if n == 1 {
        // One 3-tap kernel, applied along H for the H×1 map and along W for the 1×W map.
        let w = ctx.p(&format!("{name}.weight"))?;
        let b = ctx.p(&format!("{name}.bias"))?;
        let ws = w.shape();
        let w_col = autodiff::reshape(&w, Shape::new(ws.n, ws.c, ws.w, ws.h))?;
        let v = autodiff::conv2d(&v, &w_col, Some(&b), ConvGeometry::same(ws.w, ws.h, 1))?;
        let h = autodiff::conv2d(&h, &w, Some(&b), ConvGeometry::same(ws.h, ws.w, 1))?;
        (v, h)
    } else {
        (ctx.conv_same(&v, &name, 1)?, ctx.conv_same(&h, &name, 1)?)
    };
    let v = strip_expand_var(&v, Orientation::Vertical, s.h, s.w)?;
    let h = strip_expand_var(&h, Orientation::Horizontal, s.h, s.w)?;
    autodiff::add(&v, &h)
}

/// `F_b`.
pub fn blur_branch<'t, T: Real>(ctx: &Ctx<'t, '_, T>, fm: &Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let ys = STRIP_SIZES
        .iter()
        .map(|&n| strip_features(ctx, fm, n, prefix))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Var<'t, T>> = ys.iter().collect();
    let cat = autodiff::concat_channels(&refs)?;
    ctx.fout(&cat, &format!("{prefix}.blur_out"))
}

/// `F_wt`.
pub fn freq_branch<'t, T: Real>(ctx: &Ctx<'t, '_, T>, fm: &Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let bands = dwt_var(fm)?;
    let processed = bands.try_map(|band, v| ctx.fout(&v, &format!("{prefix}.wave_{}", band.name())))?;
    idwt_var(&processed)
}

/// `FB_k = FM_k ⊙ sigmoid(f_out(F_b + F_wt))`.
pub fn febp_forward<'t, T: Real>(
    ctx: &Ctx<'t, '_, T>,
    s1: &Var<'t, T>,
    s2: &Var<'t, T>,
    s3: &Var<'t, T>,
    level: FebpLevel,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let fm = fuse_scales(ctx, s1, s2, s3, level, prefix)?;
    attend(ctx, &fm, prefix)
}

/// Mask computation on an already fused map.
pub fn attend<'t, T: Real>(ctx: &Ctx<'t, '_, T>, fm: &Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let combined = autodiff::add(&blur_branch(ctx, fm, prefix)?, &freq_branch(ctx, fm, prefix)?)?;
    let mask = autodiff::sigmoid(&ctx.fout(&combined, &format!("{prefix}.mask"))?);
    autodiff::mul(fm, &mask)
}
