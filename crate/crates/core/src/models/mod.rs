//! Encoder/decoder assembly for both architectures.

mod blocks;
mod config;

use rand_chacha::ChaCha8Rng;

pub use blocks::{
    AttentionResidualBlock, BlockParts, BlockSpec, Norm, Resample, ResidualBlock, ScaleBlock,
    RESIDUAL_BLOCKS,
};
pub use config::{Architecture, CompressionRatio, ModelConfig};

use crate::attention::Mssgam;
use crate::autodiff::{Tape, Var};
use crate::channel::ChannelSpec;
use crate::error::{Error, Result};
use crate::layers::{upsample1d, Conv1d};
use crate::params::{Ctx, ParamStore, ShapeRecord};
use crate::rng::streams;
use crate::tensor::Tensor;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<AttentionResidualBlock>,
    pub norm: Norm,
    pub conv: Conv1d,
    pub code_norm: Norm,
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Mirrored {
        blocks: Vec<AttentionResidualBlock>,
        norm: Norm,
        conv: Conv1d,
    },
    Light {
        /// Each stage upsamples by two and convolves.
        restore: Vec<Conv1d>,
        residual: ResidualBlock,
        mssgam: Mssgam,
        conv: Conv1d,
    },
}

/// A built autoencoder: its configuration, parameters and layer wiring.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Builds and initializes a model. Encoder and decoder draw from
    /// separate random streams, so the encoder of either architecture is
    /// identical for a given seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = build_encoder(
            &config,
            &mut store,
            &mut crate::rng::stream(seed, streams::ENCODER_INIT),
        )?;
        let mut rng = crate::rng::stream(seed, streams::DECODER_INIT);
        let decoder = match config.architecture {
            Architecture::Gapscn => build_mirrored_decoder(&config, &mut store, &mut rng)?,
            Architecture::Sgapscn => build_light_decoder(&config, &mut store, &mut rng),
        };
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// Trainable element count.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn count_prefixed(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.count_prefixed(ENCODER_PREFIX)
    }

    pub fn decoder_param_count(&self) -> usize {
        self.count_prefixed(DECODER_PREFIX)
    }

    fn check_input(&self, x: Var<'_>, len: usize, op: &'static str) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != len || s[2] != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![s.first().copied().unwrap_or(0), len, 1],
                rhs: s,
            });
        }
        Ok(())
    }

    /// `(batch, M, 1)` normalized phases → `(batch, CR·M, 1)` code.
    pub fn encode<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(x, self.config.m, "encode")?;
        let e = &self.encoder;
        let mut h = x;
        for block in &e.blocks {
            let out = block.forward(cx, h)?;
            cx.record("CARB", h, out);
            h = out;
        }
        let n = e.norm.forward(cx, h)?;
        cx.record("GDN", h, n);
        let c = e.conv.forward(cx, n)?;
        cx.record("Conv", n, c);
        let code = e.code_norm.forward(cx, c)?;
        cx.record("GDN", c, code);
        Ok(code)
    }

    /// `(batch, CR·M, 1)` received code → `(batch, M, 1)` estimate in (0,1).
    pub fn decode<'t>(&self, cx: &Ctx<'t>, code: Var<'t>) -> Result<Var<'t>> {
        self.check_input(code, self.config.code_len(), "decode")?;
        let (features, pre) = match &self.decoder {
            Decoder::Mirrored { blocks, norm, conv } => {
                let mut h = code;
                for block in blocks {
                    let out = block.forward(cx, h)?;
                    cx.record("RARB", h, out);
                    h = out;
                }
                let n = norm.forward(cx, h)?;
                cx.record("IGDN", h, n);
                let c = conv.forward(cx, n)?;
                cx.record("Conv", n, c);
                (n, c)
            }
            Decoder::Light {
                restore,
                residual,
                mssgam,
                conv,
            } => {
                let mut h = code;
                for stage in restore {
                    let out = stage.forward(cx, upsample1d(h)?)?;
                    cx.record("Restore", h, out);
                    h = out;
                }
                let r = residual.forward(cx, h)?;
                cx.record("RB", h, r);
                let m = mssgam.forward(cx, r)?;
                cx.record("MSSGAM", r, m);
                let c = conv.forward(cx, m)?;
                cx.record("Conv", m, c);
                (m, c)
            }
        };
        // the sigmoid is the output convolution's activation, so its row
        // spans that convolution
        let out = pre.sigmoid();
        cx.record("Sigmoid", features, out);
        Ok(out)
    }

    /// Encode, send over `channel`, decode. The channel noise enters the
    /// graph as a constant.
    pub fn transmit<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        channel: &ChannelSpec,
        rng: &mut impl rand::Rng,
    ) -> Result<Var<'t>> {
        let code = self.encode(cx, x)?;
        let noise = channel.noise(&code.value(), rng)?;
        let sent = if channel.gain == 1.0 {
            code
        } else {
            code.scale(channel.gain)
        };
        let received = match channel.snr_db {
            Some(_) => sent.add(cx.tape.constant_from(code.shape(), noise)?)?,
            None => sent,
        };
        self.decode(cx, received)
    }

    /// Block-level input/output shapes of one noiseless pass.
    pub fn shape_trace(&self) -> Result<Vec<ShapeRecord>> {
        let tape = Tape::new();
        let cx = self.store.bind(&tape, false);
        cx.start_trace();
        let x = tape.constant(&Tensor::full(vec![1, self.config.m, 1], 0.5));
        let code = self.encode(&cx, x)?;
        self.decode(&cx, code)?;
        Ok(cx.take_trace())
    }
}

fn build_encoder(
    config: &ModelConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<Encoder> {
    let w = config.width;
    let mut blocks = Vec::new();
    let mut length = config.m;
    for i in 0..config.cr.stages() {
        length /= 2;
        let spec = BlockSpec {
            in_channels: if i == 0 { 1 } else { w },
            width: w,
            length,
            resample: Resample::Down,
            attention: config.attention,
            attention_options: config.attention_options,
            gdn: config.gdn,
        };
        blocks.push(AttentionResidualBlock::new(
            store,
            &format!("encoder.carb{}", i + 1),
            spec,
            rng,
        )?);
    }
    Ok(Encoder {
        blocks,
        norm: Norm::new(store, "encoder.gdn", w, false, config.gdn),
        conv: Conv1d::same(store, "encoder.conv", 1, w, 1, rng),
        code_norm: Norm::new(store, "encoder.code_gdn", 1, false, config.gdn),
    })
}

fn build_mirrored_decoder(
    config: &ModelConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<Decoder> {
    let w = config.width;
    let mut blocks = Vec::new();
    let mut length = config.code_len();
    for i in 0..config.cr.stages() {
        length *= 2;
        let spec = BlockSpec {
            in_channels: if i == 0 { 1 } else { w },
            width: w,
            length,
            resample: Resample::Up,
            attention: config.attention,
            attention_options: config.attention_options,
            gdn: config.gdn,
        };
        blocks.push(AttentionResidualBlock::new(
            store,
            &format!("decoder.rarb{}", i + 1),
            spec,
            rng,
        )?);
    }
    Ok(Decoder::Mirrored {
        blocks,
        norm: Norm::new(store, "decoder.igdn", w, true, config.gdn),
        conv: Conv1d::same(store, "decoder.conv", 1, w, 1, rng),
    })
}

fn build_light_decoder(
    config: &ModelConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Decoder {
    let w = config.width;
    let restore = (0..config.cr.stages())
        .map(|i| {
            let cin = if i == 0 { 1 } else { w };
            Conv1d::same(store, &format!("decoder.restore{}", i + 1), 3, cin, w, rng)
        })
        .collect();
    Decoder::Light {
        restore,
        residual: ResidualBlock::new(store, "decoder.rb", w, rng),
        mssgam: Mssgam::new(store, "decoder.mssgam", w, rng),
        conv: Conv1d::same(store, "decoder.conv", 1, w, 1, rng),
    }
}
