use rand::Rng;

use crate::attention::{AttentionBlock, AttentionKind, AttentionOptions};
use crate::autodiff::Var;
use crate::error::Result;
use crate::layers::{maxpool1d, upsample1d, Conv1d, Gdn};
use crate::params::{Ctx, ParamStore};

/// GDN (or IGDN) stage that may be switched off for ablations.
#[derive(Clone, Debug)]
pub struct Norm(pub Option<Gdn>);

impl Norm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        inverse: bool,
        enabled: bool,
    ) -> Self {
        Norm(enabled.then(|| Gdn::new(store, name, channels, inverse)))
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match &self.0 {
            Some(g) => g.forward(cx, x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Down,
    Up,
}

impl Resample {
    fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Resample::Down => maxpool1d(x),
            Resample::Up => upsample1d(x),
        }
    }
}

/// Two-branch rescaling block: `conv → resample` plus
/// `conv → resample → conv`, summed and normalized. Downsampling gives the
/// compression variant, upsampling the reconstruction variant.
#[derive(Clone, Debug)]
pub struct ScaleBlock {
    pub short: Conv1d,
    pub long_in: Conv1d,
    pub long_out: Conv1d,
    pub norm: Norm,
    pub resample: Resample,
}

impl ScaleBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        width: usize,
        resample: Resample,
        gdn: bool,
        rng: &mut impl Rng,
    ) -> Self {
        ScaleBlock {
            short: Conv1d::same(store, &format!("{name}.short"), 3, in_channels, width, rng),
            long_in: Conv1d::same(
                store,
                &format!("{name}.long_in"),
                3,
                in_channels,
                width,
                rng,
            ),
            long_out: Conv1d::same(store, &format!("{name}.long_out"), 3, width, width, rng),
            norm: Norm::new(
                store,
                &format!("{name}.gdn"),
                width,
                resample == Resample::Up,
                gdn,
            ),
            resample,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let a = self.resample.apply(self.short.forward(cx, x)?)?;
        let b = self.resample.apply(self.long_in.forward(cx, x)?)?;
        let b = self.long_out.forward(cx, b)?;
        self.norm.forward(cx, a.add(b)?)
    }
}

/// `conv1 → conv3 → conv1`, with the last convolution's input added to its
/// output.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub expand: Conv1d,
    pub mix: Conv1d,
    pub project: Conv1d,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            expand: Conv1d::same(store, &format!("{name}.conv1"), 1, width, width, rng),
            mix: Conv1d::same(store, &format!("{name}.conv2"), 3, width, width, rng),
            project: Conv1d::same(store, &format!("{name}.conv3"), 1, width, width, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.mix.forward(cx, self.expand.forward(cx, x)?)?;
        h.add(self.project.forward(cx, h)?)
    }
}

pub const RESIDUAL_BLOCKS: usize = 3;

/// Intermediate values of one attention residual block.
pub struct BlockParts<'t> {
    pub scaled: Var<'t>,
    pub residual: Var<'t>,
    pub output: Var<'t>,
}

/// Rescaling block, residual stack, attention and (I)GDN, with the residual
/// stack output added to the normalized attention output.
#[derive(Clone, Debug)]
pub struct AttentionResidualBlock {
    pub scale: ScaleBlock,
    pub residuals: Vec<ResidualBlock>,
    pub attention: AttentionBlock,
    pub norm: Norm,
}

/// Construction parameters shared by every attention residual block.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub width: usize,
    /// Feature length after rescaling, where attention runs.
    pub length: usize,
    pub resample: Resample,
    pub attention: AttentionKind,
    pub attention_options: AttentionOptions,
    pub gdn: bool,
}

impl AttentionResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: BlockSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let scale = ScaleBlock::new(
            store,
            &format!("{name}.scale"),
            spec.in_channels,
            spec.width,
            spec.resample,
            spec.gdn,
            rng,
        );
        let residuals = (1..=RESIDUAL_BLOCKS)
            .map(|i| ResidualBlock::new(store, &format!("{name}.rb{i}"), spec.width, rng))
            .collect();
        let attention = AttentionBlock::new(
            spec.attention,
            store,
            &format!("{name}.attention"),
            spec.length,
            spec.width,
            spec.attention_options,
            rng,
        )?;
        let norm = Norm::new(
            store,
            &format!("{name}.gdn"),
            spec.width,
            spec.resample == Resample::Up,
            spec.gdn,
        );
        Ok(AttentionResidualBlock {
            scale,
            residuals,
            attention,
            norm,
        })
    }

    pub fn forward_parts<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<BlockParts<'t>> {
        let scaled = self.scale.forward(cx, x)?;
        let mut residual = scaled;
        for rb in &self.residuals {
            residual = rb.forward(cx, residual)?;
        }
        let attended = self.attention.forward(cx, residual)?;
        let output = residual.add(self.norm.forward(cx, attended)?)?;
        Ok(BlockParts {
            scaled,
            residual,
            output,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_parts(cx, x)?.output)
    }
}
