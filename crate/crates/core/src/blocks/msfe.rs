//! Multi-scale feature extraction.
//!
//! ```text
//! F = act(conv3x3(B))
//! D = concat(dw1(F), dw3(F), dw5(F), dw7(F))      depthwise, same padding
//! P = BN(point1x1(BN(D)))                          4c -> c
//! M = merge1x1(concat(P, B))                       c + c_img -> c
//! ```
//!
//! and the cross-scale fusion
//!
//! ```text
//! M_out = proj1x1(concat(S_prev, mix3x3(gate1x1(M) ⊙ prev3x3(S_prev))))
//! S     = M_out + f_out(M_out)
//! ```
//!
//! At the finest scale there is no previous level and `M_out = M`.

use crate::autodiff::{self, Var};
use crate::error::{contract, Result};
use crate::ops::ConvGeometry;
use crate::params::{Ctx, Layout};
use crate::tensor::Real;

pub const DEPTHWISE_SIZES: [usize; 4] = [1, 3, 5, 7];

pub fn declare_msfe(layout: &mut Layout, prefix: &str, c_img: usize, c: usize) {
    layout.conv(&format!("{prefix}.entry"), c_img, c, 3, 3, 1);
    for k in DEPTHWISE_SIZES {
        layout.conv(&format!("{prefix}.kdepth{k}"), c, c, k, k, c);
    }
    layout.batch_norm(&format!("{prefix}.bn_d"), 4 * c);
    layout.conv(&format!("{prefix}.point"), 4 * c, c, 1, 1, 1);
    layout.batch_norm(&format!("{prefix}.bn_p"), c);
    layout.conv(&format!("{prefix}.merge"), c + c_img, c, 1, 1, 1);
}

pub fn declare_fuse(layout: &mut Layout, prefix: &str, c: usize, has_previous: bool) {
    if has_previous {
        layout.conv(&format!("{prefix}.gate"), c, c, 1, 1, 1);
        layout.conv(&format!("{prefix}.prev"), c, c, 3, 3, 1);
        layout.conv(&format!("{prefix}.mix"), c, c, 3, 3, 1);
        layout.conv(&format!("{prefix}.proj"), 2 * c, c, 1, 1, 1);
    }
    layout.fout(&format!("{prefix}.fout"), c, c);
}

/// The four depthwise branches, concatenated along channels.
pub fn depthwise_branches<'t, T: Real>(ctx: &Ctx<'t, '_, T>, f: &Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let c = f.shape().c;
    let branches = DEPTHWISE_SIZES
        .iter()
        .map(|k| ctx.conv_same(f, &format!("{prefix}.kdepth{k}"), c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Var<'t, T>> = branches.iter().collect();
    autodiff::concat_channels(&refs)
}

/// `M_k` from the scale-k input.
pub fn msfe_forward<'t, T: Real>(ctx: &Ctx<'t, '_, T>, b: &Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let f = ctx.act(&ctx.conv_same(b, &format!("{prefix}.entry"), 1)?);
    let d = depthwise_branches(ctx, &f, prefix)?;
    let d = ctx.batch_norm(&d, &format!("{prefix}.bn_d"))?;
    let p = ctx.conv(&d, &format!("{prefix}.point"), ConvGeometry::new(1, 0, 1))?;
    let p = ctx.batch_norm(&p, &format!("{prefix}.bn_p"))?;
    contract!(
        p.shape().h == b.shape().h && p.shape().w == b.shape().w,
        "pointwise features {} cannot be concatenated with input {}",
        p.shape(),
        b.shape()
    );
    let cat = autodiff::concat_channels(&[&p, b])?;
    ctx.conv(&cat, &format!("{prefix}.merge"), ConvGeometry::new(1, 0, 1))
}

/// `S_k` from `M_k` and, below the finest scale, the previous level's
/// features already brought to this resolution and width.
pub fn msfe_fuse<'t, T: Real>(
    ctx: &Ctx<'t, '_, T>,
    m: &Var<'t, T>,
    prev_down: Option<&Var<'t, T>>,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let m_out = match prev_down {
        None => m.clone(),
        Some(s) => {
            contract!(
                s.shape() == m.shape(),
                "previous-scale features {} do not match this scale {}",
                s.shape(),
                m.shape()
            );
            let gate = ctx.conv(m, &format!("{prefix}.gate"), ConvGeometry::new(1, 0, 1))?;
            let prev = ctx.conv_same(s, &format!("{prefix}.prev"), 1)?;
            let mixed = ctx.conv_same(&autodiff::mul(&gate, &prev)?, &format!("{prefix}.mix"), 1)?;
            let cat = autodiff::concat_channels(&[s, &mixed])?;
            ctx.conv(&cat, &format!("{prefix}.proj"), ConvGeometry::new(1, 0, 1))?
        }
    };
    let refined = ctx.fout(&m_out, &format!("{prefix}.fout"))?;
    autodiff::add(&m_out, &refined)
}
