//! Attention mechanisms on `(batch, length, channels)` feature maps.
//!
//! Every block returns a tensor of its input's shape, except the
//! simplified global attention stages used inside [`Mssgam`], which halve
//! or double the length.

mod cbam;
mod global;
mod mssgam;
mod se;
mod triplet;
mod tse;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use cbam::Cbam;
pub use global::{GlobalAttention, GlobalBranches, GlobalOptions};
pub use mssgam::{Direction, Mssgam, SimplifiedGlobal};
pub use se::SqueezeExcite;
pub use triplet::TripletAttention;
pub use tse::TiledSqueezeExcite;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};

/// Attention variant selectable in a model configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Se,
    Cbam,
    Tse,
    Triplet,
    Global,
    /// Global attention with mean/max pooling feeding its maps.
    GlobalWithPooling,
    /// Global attention without the joint channel-spatial branch.
    GlobalNoJoint,
    /// Pass-through; the block returns its input.
    Identity,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 8] = [
        AttentionKind::Se,
        AttentionKind::Cbam,
        AttentionKind::Tse,
        AttentionKind::Triplet,
        AttentionKind::Global,
        AttentionKind::GlobalWithPooling,
        AttentionKind::GlobalNoJoint,
        AttentionKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Se => "se",
            AttentionKind::Cbam => "cbam",
            AttentionKind::Tse => "tse",
            AttentionKind::Triplet => "triplet",
            AttentionKind::Global => "global",
            AttentionKind::GlobalWithPooling => "global-pooling",
            AttentionKind::GlobalNoJoint => "global-no-joint",
            AttentionKind::Identity => "none",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Hyperparameters shared by the attention blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionOptions {
    /// Bottleneck ratio of the SE/CBAM/TSE excitation layers.
    pub reduction: usize,
    /// TSE pooling window; `None` means half the feature length.
    pub tse_tile: Option<usize>,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            reduction: 16,
            tse_tile: None,
        }
    }
}

pub fn bottleneck(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::InvalidConfig(format!(
            "bottleneck ratio {reduction} does not divide {channels} channels"
        )));
    }
    Ok(channels / reduction)
}

/// Output of an attention block plus the sigmoid maps it produced.
pub struct Attended<'t> {
    pub output: Var<'t>,
    pub maps: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub enum AttentionBlock {
    Se(SqueezeExcite),
    Cbam(Cbam),
    Tse(TiledSqueezeExcite),
    Triplet(TripletAttention),
    Global(GlobalAttention),
    Identity,
}

impl AttentionBlock {
    /// Builds a block for feature maps of `length × channels`.
    pub fn new(
        kind: AttentionKind,
        store: &mut ParamStore,
        name: &str,
        length: usize,
        channels: usize,
        opts: AttentionOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            AttentionKind::Se => AttentionBlock::Se(SqueezeExcite::new(
                store,
                name,
                channels,
                opts.reduction,
                rng,
            )?),
            AttentionKind::Cbam => {
                AttentionBlock::Cbam(Cbam::new(store, name, channels, opts.reduction, rng)?)
            }
            AttentionKind::Tse => AttentionBlock::Tse(TiledSqueezeExcite::new(
                store,
                name,
                channels,
                opts.reduction,
                opts.tse_tile,
                rng,
            )?),
            AttentionKind::Triplet => {
                AttentionBlock::Triplet(TripletAttention::new(store, name, rng))
            }
            AttentionKind::Global => AttentionBlock::Global(GlobalAttention::new(
                store,
                name,
                length,
                channels,
                GlobalOptions::default(),
                rng,
            )),
            AttentionKind::GlobalWithPooling => AttentionBlock::Global(GlobalAttention::new(
                store,
                name,
                length,
                channels,
                GlobalOptions {
                    pooling: true,
                    joint_branch: true,
                },
                rng,
            )),
            AttentionKind::GlobalNoJoint => AttentionBlock::Global(GlobalAttention::new(
                store,
                name,
                length,
                channels,
                GlobalOptions {
                    pooling: false,
                    joint_branch: false,
                },
                rng,
            )),
            AttentionKind::Identity => AttentionBlock::Identity,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_detailed(cx, x)?.output)
    }

    pub fn forward_detailed<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Attended<'t>> {
        match self {
            AttentionBlock::Se(b) => b.forward_detailed(cx, x),
            AttentionBlock::Cbam(b) => b.forward_detailed(cx, x),
            AttentionBlock::Tse(b) => b.forward_detailed(cx, x),
            AttentionBlock::Triplet(b) => b.forward_detailed(cx, x),
            AttentionBlock::Global(b) => b.forward_detailed(cx, x),
            AttentionBlock::Identity => Ok(Attended {
                output: x,
                maps: Vec::new(),
            }),
        }
    }
}

/// Mean and max of a rank-3 tensor over `axis` (1 or 2), laid out as two
/// channels along the remaining axis: `(b, n, m)` → `(b, m, 2)` for axis 1,
/// `(b, n, 2)` for axis 2.
pub(crate) fn mean_max_pool<'t>(x: Var<'t>, axis: usize) -> Result<Var<'t>> {
    let mut mean = x.mean_axis(axis)?;
    let mut max = x.max_axis(axis)?;
    if axis == 1 {
        mean = mean.permute(&[0, 2, 1])?;
        max = max.permute(&[0, 2, 1])?;
    }
    x.tape().concat(&[mean, max], 2)
}
