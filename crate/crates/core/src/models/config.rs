use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionKind, AttentionOptions};
use crate::error::{Error, Result};

/// Code length as a fraction of the phase-vector length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CompressionRatio {
    Half,
    Quarter,
    Eighth,
}

impl CompressionRatio {
    pub const ALL: [CompressionRatio; 3] = [
        CompressionRatio::Half,
        CompressionRatio::Quarter,
        CompressionRatio::Eighth,
    ];

    pub fn denominator(self) -> usize {
        1 << self.stages()
    }

    /// Number of halving (encoder) or doubling (decoder) stages.
    pub fn stages(self) -> usize {
        match self {
            CompressionRatio::Half => 1,
            CompressionRatio::Quarter => 2,
            CompressionRatio::Eighth => 3,
        }
    }

    pub fn value(self) -> f64 {
        1.0 / self.denominator() as f64
    }
}

impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.denominator())
    }
}

impl FromStr for CompressionRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/2" | "0.5" => Ok(CompressionRatio::Half),
            "1/4" | "0.25" => Ok(CompressionRatio::Quarter),
            "1/8" | "0.125" => Ok(CompressionRatio::Eighth),
            other => Err(Error::InvalidConfig(format!(
                "unsupported compression ratio `{other}` (expected 1/2, 1/4 or 1/8)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Mirrored encoder and decoder of attention residual blocks.
    Gapscn,
    /// Same encoder, lightweight decoder ending in a multi-scale denoiser.
    Sgapscn,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Gapscn => "gapscn",
            Architecture::Sgapscn => "sgapscn",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gapscn" => Ok(Architecture::Gapscn),
            "sgapscn" => Ok(Architecture::Sgapscn),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of reflecting elements.
    pub m: usize,
    /// Quantization bits per phase.
    pub k: u32,
    pub cr: CompressionRatio,
    pub width: usize,
    pub attention: AttentionKind,
    pub architecture: Architecture,
    /// When false every GDN/IGDN stage is the identity.
    pub gdn: bool,
    pub attention_options: AttentionOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 128,
            k: 8,
            cr: CompressionRatio::Half,
            width: 64,
            attention: AttentionKind::Global,
            architecture: Architecture::Gapscn,
            gdn: true,
            attention_options: AttentionOptions::default(),
        }
    }
}

impl ModelConfig {
    pub fn code_len(&self) -> usize {
        self.m / self.cr.denominator()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.m.is_power_of_two() || self.m < 8 {
            return Err(Error::InvalidConfig(format!(
                "element count {} must be a power of two of at least 8",
                self.m
            )));
        }
        if self.code_len() < 1 {
            return Err(Error::InvalidConfig(format!(
                "compression ratio {} leaves no code for {} elements",
                self.cr, self.m
            )));
        }
        if self.k == 0 || self.k > 16 {
            return Err(Error::InvalidConfig(format!(
                "quantization bits {} outside 1..=16",
                self.k
            )));
        }
        if self.width == 0 {
            return Err(Error::InvalidConfig("width must be positive".into()));
        }
        if matches!(
            self.attention,
            AttentionKind::Se | AttentionKind::Cbam | AttentionKind::Tse
        ) {
            crate::attention::bottleneck(self.width, self.attention_options.reduction)?;
        }
        Ok(())
    }
}
