use rand::Rng;

use super::{bottleneck, mean_max_pool, Attended};
use crate::autodiff::Var;
use crate::error::Result;
use crate::layers::{BatchNorm, Conv1d, Dense};
use crate::params::{Ctx, ParamStore};

pub const CBAM_KERNEL: usize = 7;

/// Channel attention from a shared MLP over average and max pooled
/// descriptors, followed by spatial attention from a kernel-7 convolution
/// over channel-pooled statistics.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Dense,
    pub fc2: Dense,
    pub spatial: Conv1d,
    pub norm: BatchNorm,
}

impl Cbam {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = bottleneck(channels, reduction)?;
        Ok(Cbam {
            fc1: Dense::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Dense::new(store, &format!("{name}.fc2"), hidden, channels, rng),
            spatial: Conv1d::same(store, &format!("{name}.spatial"), CBAM_KERNEL, 2, 1, rng),
            norm: BatchNorm::new(store, &format!("{name}.bn"), 1),
        })
    }

    fn mlp<'t>(&self, cx: &Ctx<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(cx, v)?.relu();
        self.fc2.forward(cx, h)
    }

    pub fn forward_detailed<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Attended<'t>> {
        let avg = self.mlp(cx, x.mean_axis(1)?)?;
        let max = self.mlp(cx, x.max_axis(1)?)?;
        let channel_map = avg.add(max)?.sigmoid();
        let refined = x.mul(channel_map)?;

        let pooled = mean_max_pool(refined, 2)?;
        let conv = self.spatial.forward(cx, pooled)?;
        let spatial_map = self.norm.forward(cx, conv)?.sigmoid();
        Ok(Attended {
            output: refined.mul(spatial_map)?,
            maps: vec![channel_map, spatial_map],
        })
    }
}
