use rand::Rng;

use super::{mean_max_pool, Attended};
use crate::autodiff::Var;
use crate::error::Result;
use crate::layers::{Conv1d, Conv2d};
use crate::params::{Ctx, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalOptions {
    /// Feed mean/max pooled statistics to the spatial and channel branches
    /// instead of the full feature map.
    pub pooling: bool,
    /// Keep the joint channel-spatial branch.
    pub joint_branch: bool,
}

impl Default for GlobalOptions {
    fn default() -> Self {
        GlobalOptions {
            pooling: false,
            joint_branch: true,
        }
    }
}

/// Sum of a channel branch (on the transposed map), a joint branch (a 1×1
/// 2D convolution over the expanded map) and a spatial branch, each gating
/// the input by its own sigmoid map.
#[derive(Clone, Debug)]
pub struct GlobalAttention {
    /// Kernel-1 convolution on `(channels, length)` with `length` filters.
    pub channel: Conv1d,
    pub joint: Option<Conv2d>,
    /// Kernel-1 convolution on `(length, channels)` with `channels` filters.
    pub spatial: Conv1d,
    pub options: GlobalOptions,
}

/// Per-branch gated outputs, each shaped like the input.
pub struct GlobalBranches<'t> {
    pub channel: Var<'t>,
    pub joint: Option<Var<'t>>,
    pub spatial: Var<'t>,
    pub maps: Vec<Var<'t>>,
}

impl GlobalAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        length: usize,
        channels: usize,
        options: GlobalOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let (channel_in, spatial_in) = if options.pooling {
            (2, 2)
        } else {
            (length, channels)
        };
        GlobalAttention {
            channel: Conv1d::same(
                store,
                &format!("{name}.channel"),
                1,
                channel_in,
                length,
                rng,
            ),
            joint: options
                .joint_branch
                .then(|| Conv2d::new(store, &format!("{name}.joint"), (1, 1), 1, 1, (1, 1), rng)),
            spatial: Conv1d::same(
                store,
                &format!("{name}.spatial"),
                1,
                spatial_in,
                channels,
                rng,
            ),
            options,
        }
    }

    fn branch_input<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if self.options.pooling {
            mean_max_pool(x, 2)
        } else {
            Ok(x)
        }
    }

    pub fn branches<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<GlobalBranches<'t>> {
        let shape = x.shape();
        let mut maps = Vec::with_capacity(3);

        let rotated = x.transpose_last()?;
        let channel_map = self
            .channel
            .forward(cx, self.branch_input(rotated)?)?
            .sigmoid();
        let channel = rotated.mul(channel_map)?.transpose_last()?;
        maps.push(channel_map);

        let joint = match &self.joint {
            Some(conv) => {
                let expanded = x.reshape(&[shape[0], shape[1], shape[2], 1])?;
                let joint_map = conv.forward(cx, expanded)?.sigmoid().reshape(&shape)?;
                maps.push(joint_map);
                Some(x.mul(joint_map)?)
            }
            None => None,
        };

        let spatial_map = self.spatial.forward(cx, self.branch_input(x)?)?.sigmoid();
        let spatial = x.mul(spatial_map)?;
        maps.push(spatial_map);

        Ok(GlobalBranches {
            channel,
            joint,
            spatial,
            maps,
        })
    }

    pub fn forward_detailed<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Attended<'t>> {
        let b = self.branches(cx, x)?;
        let mut output = b.channel;
        if let Some(j) = b.joint {
            output = output.add(j)?;
        }
        output = output.add(b.spatial)?;
        Ok(Attended {
            output,
            maps: b.maps,
        })
    }
}
