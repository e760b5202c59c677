use rand::Rng;

use crate::autodiff::Padding;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv1d, Conv2d, ConvTranspose1d, ConvTranspose2d};
use crate::params::{Ctx, ParamStore};

pub const MSSGAM_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

#[derive(Clone, Debug)]
enum MapConv {
    Down(Conv2d),
    Up(ConvTranspose2d),
}

#[derive(Clone, Debug)]
enum ValueConv {
    Down(Conv1d),
    Up(ConvTranspose1d),
}

/// Rescaling attention stage: a stride-2 convolution (transposed for `Up`)
/// produces the values, and a single-filter 2D convolution over the
/// expanded feature map produces the gate at the new length.
#[derive(Clone, Debug)]
pub struct SimplifiedGlobal {
    pub direction: Direction,
    map: MapConv,
    value: ValueConv,
}

impl SimplifiedGlobal {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        direction: Direction,
        rng: &mut impl Rng,
    ) -> Self {
        let k = MSSGAM_KERNEL;
        let (map, value) = match direction {
            Direction::Down => (
                MapConv::Down(Conv2d::new(
                    store,
                    &format!("{name}.map"),
                    (k, k),
                    1,
                    1,
                    (2, 1),
                    rng,
                )),
                ValueConv::Down(Conv1d::new(
                    store,
                    &format!("{name}.value"),
                    k,
                    channels,
                    channels,
                    2,
                    Padding::Same,
                    rng,
                )),
            ),
            Direction::Up => (
                MapConv::Up(ConvTranspose2d::new(
                    store,
                    &format!("{name}.map"),
                    (k, k),
                    1,
                    1,
                    (2, 1),
                    rng,
                )),
                ValueConv::Up(ConvTranspose1d::new(
                    store,
                    &format!("{name}.value"),
                    k,
                    channels,
                    channels,
                    2,
                    rng,
                )),
            ),
        };
        SimplifiedGlobal {
            direction,
            map,
            value,
        }
    }

    /// Returns the gated output and the attention map.
    pub fn forward_with_map<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        if self.direction == Direction::Down && l % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "simplified_global",
                msg: format!("cannot halve odd length {l}"),
            });
        }
        let expanded = x.reshape(&[b, l, c, 1])?;
        let raw = match &self.map {
            MapConv::Down(conv) => conv.forward(cx, expanded)?,
            MapConv::Up(conv) => conv.forward(cx, expanded)?,
        };
        let rs = raw.shape();
        let map = raw.sigmoid().reshape(&[rs[0], rs[1], rs[2]])?;
        let value = match &self.value {
            ValueConv::Down(conv) => conv.forward(cx, x)?,
            ValueConv::Up(conv) => conv.forward(cx, x)?,
        };
        Ok((value.mul(map)?, map))
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_map(cx, x)?.0)
    }
}

/// Two-scale denoiser: attention downscale, plain downscale, attention
/// upscale, skip from the first stage, plain upscale, and an input residual.
#[derive(Clone, Debug)]
pub struct Mssgam {
    pub down: SimplifiedGlobal,
    pub mid: Conv1d,
    pub up: SimplifiedGlobal,
    pub last: ConvTranspose1d,
}

impl Mssgam {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let k = MSSGAM_KERNEL;
        Mssgam {
            down: SimplifiedGlobal::new(
                store,
                &format!("{name}.down"),
                channels,
                Direction::Down,
                rng,
            ),
            mid: Conv1d::new(
                store,
                &format!("{name}.mid"),
                k,
                channels,
                channels,
                2,
                Padding::Same,
                rng,
            ),
            up: SimplifiedGlobal::new(store, &format!("{name}.up"), channels, Direction::Up, rng),
            last: ConvTranspose1d::new(
                store,
                &format!("{name}.last"),
                k,
                channels,
                channels,
                2,
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let l = x.shape()[1];
        if l % 4 != 0 {
            return Err(Error::InvalidShape {
                op: "mssgam",
                msg: format!("length {l} is not a multiple of 4"),
            });
        }
        let d1 = self.down.forward(cx, x)?;
        let d2 = self.mid.forward(cx, d1)?;
        let u1 = self.up.forward(cx, d2)?;
        self.last.forward(cx, u1.add(d1)?)?.add(x)
    }
}
