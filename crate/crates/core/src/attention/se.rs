use rand::Rng;

use super::{bottleneck, Attended};
use crate::autodiff::Var;
use crate::error::Result;
use crate::layers::Dense;
use crate::params::{Ctx, ParamStore};

/// Squeeze-and-excitation: `x ⊗ σ(FC(ReLU(FC(GAP(x)))))`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl SqueezeExcite {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = bottleneck(channels, reduction)?;
        Ok(SqueezeExcite {
            fc1: Dense::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Dense::new(store, &format!("{name}.fc2"), hidden, channels, rng),
        })
    }

    pub fn forward_detailed<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Attended<'t>> {
        let squeezed = x.mean_axis(1)?;
        let hidden = self.fc1.forward(cx, squeezed)?.relu();
        let map = self.fc2.forward(cx, hidden)?.sigmoid();
        Ok(Attended {
            output: x.mul(map)?,
            maps: vec![map],
        })
    }
}
