use rand::Rng;

use super::{mean_max_pool, Attended};
use crate::autodiff::Var;
use crate::error::Result;
use crate::layers::Conv1d;
use crate::params::{Ctx, ParamStore};

pub const TRIPLET_KERNEL: usize = 7;

/// Three-branch cross-dimension attention averaged over branches. The first
/// two branches work on the transposed `(channels, length)` view and rotate
/// their result back; the third works on the input directly.
#[derive(Clone, Debug)]
pub struct TripletAttention {
    pub branches: [Conv1d; 3],
}

impl TripletAttention {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        let mut conv = |i: usize| {
            Conv1d::same(
                store,
                &format!("{name}.branch{i}"),
                TRIPLET_KERNEL,
                2,
                1,
                rng,
            )
        };
        TripletAttention {
            branches: [conv(1), conv(2), conv(3)],
        }
    }

    fn gate<'t>(conv: &Conv1d, cx: &Ctx<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let map = conv.forward(cx, mean_max_pool(x, 2)?)?.sigmoid();
        Ok((x.mul(map)?, map))
    }

    pub fn forward_detailed<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Attended<'t>> {
        let rotated = x.transpose_last()?;
        let (a1, m1) = Self::gate(&self.branches[0], cx, rotated)?;
        let (a2, m2) = Self::gate(&self.branches[1], cx, rotated)?;
        let (a3, m3) = Self::gate(&self.branches[2], cx, x)?;
        let sum = a1.transpose_last()?.add(a2.transpose_last()?)?.add(a3)?;
        Ok(Attended {
            output: sum.scale(1.0 / 3.0),
            maps: vec![m1, m2, m3],
        })
    }
}
