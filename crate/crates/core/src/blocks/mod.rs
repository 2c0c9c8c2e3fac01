//! Building blocks of the network: the multi-scale feature extractor, the
//! frequency-enhanced blur perception block, and plain residual blocks.

pub mod febp;
pub mod msfe;
pub mod strip;

pub use febp::{blur_branch, febp_forward, freq_branch, FebpLevel};
pub use msfe::{msfe_forward, msfe_fuse};
pub use strip::{strip_pool, Orientation};

use crate::autodiff::{self, Var};
use crate::error::Result;
use crate::params::{Ctx, Layout};
use crate::tensor::Real;

pub fn declare_resblock(layout: &mut Layout, prefix: &str, c: usize) {
    layout.conv(&format!("{prefix}.conv1"), c, c, 3, 3, 1);
    layout.conv(&format!("{prefix}.conv2"), c, c, 3, 3, 1);
}

/// `x + conv2(act(conv1(x)))`.
pub fn resblock_forward<'t, T: Real>(ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let h = ctx.act(&ctx.conv_same(x, &format!("{prefix}.conv1"), 1)?);
    let h = ctx.conv_same(&h, &format!("{prefix}.conv2"), 1)?;
    autodiff::add(x, &h)
}
