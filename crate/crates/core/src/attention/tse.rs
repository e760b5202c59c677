use rand::Rng;

use super::{bottleneck, Attended};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::Conv1d;
use crate::params::{Ctx, ParamStore};

/// Tiled squeeze-and-excitation: the squeeze is an average pool over tiles
/// of the length axis, the excitation two kernel-1 convolutions, and the map
/// is upsampled back to full length.
#[derive(Clone, Debug)]
pub struct TiledSqueezeExcite {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    /// Pool window; `None` means half the input length.
    pub tile: Option<usize>,
}

impl TiledSqueezeExcite {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        tile: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = bottleneck(channels, reduction)?;
        if tile == Some(0) {
            return Err(Error::InvalidConfig("tile size must be positive".into()));
        }
        Ok(TiledSqueezeExcite {
            conv1: Conv1d::same(store, &format!("{name}.conv1"), 1, channels, hidden, rng),
            conv2: Conv1d::same(store, &format!("{name}.conv2"), 1, hidden, channels, rng),
            tile,
        })
    }

    pub fn tile_for(&self, length: usize) -> usize {
        self.tile.unwrap_or((length / 2).max(1))
    }

    pub fn forward_detailed<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Attended<'t>> {
        let tile = self.tile_for(x.shape()[1]);
        let pooled = x.avgpool(tile)?;
        let hidden = self.conv1.forward(cx, pooled)?.relu();
        let coarse = self.conv2.forward(cx, hidden)?.sigmoid();
        let map = coarse.upsample(tile)?;
        Ok(Attended {
            output: x.mul(map)?,
            maps: vec![map],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tile_must_divide_length() {
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(2);
        let tse = TiledSqueezeExcite::new(&mut store, "tse", 4, 2, Some(3), rng).unwrap();
        let tape = Tape::new();
        let cx = store.bind(&tape, false);
        let x = tape.leaf(&Tensor::zeros(vec![1, 8, 4]));
        assert!(tse.forward_detailed(&cx, x).is_err());
    }

    #[test]
    fn default_tile_is_half_length() {
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(2);
        let tse = TiledSqueezeExcite::new(&mut store, "tse", 4, 2, None, rng).unwrap();
        assert_eq!(tse.tile_for(8), 4);
        assert_eq!(tse.tile_for(1), 1);
    }
}
