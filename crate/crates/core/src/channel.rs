//! Quantized phase vectors and the AWGN feedback channel.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest supported quantization resolution.
pub const MAX_BITS: u32 = 16;

/// One vector of quantized phase indices, each in `[0, 2^k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QpsVector {
    pub indices: Vec<u16>,
    pub k: u32,
}

impl QpsVector {
    pub fn new(indices: Vec<u16>, k: u32) -> Result<Self> {
        check_bits(k)?;
        let levels = 1u32 << k;
        if let Some(bad) = indices.iter().find(|&&i| u32::from(i) >= levels) {
            return Err(Error::Domain(format!(
                "index {bad} out of range for {k} bits"
            )));
        }
        Ok(QpsVector { indices, k })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Phase angles `2π·index/2^k` in radians.
    pub fn phases(&self) -> Vec<f64> {
        let levels = (1u32 << self.k) as f64;
        self.indices
            .iter()
            .map(|&i| std::f64::consts::TAU * f64::from(i) / levels)
            .collect()
    }

    /// Network-space values `index / 2^k` in `[0, 1)`.
    pub fn normalized(&self) -> Vec<f64> {
        let levels = (1u32 << self.k) as f64;
        self.indices
            .iter()
            .map(|&i| f64::from(i) / levels)
            .collect()
    }
}

pub(crate) fn check_bits(k: u32) -> Result<()> {
    if k == 0 || k > MAX_BITS {
        return Err(Error::InvalidConfig(format!(
            "quantization bits {k} outside 1..={MAX_BITS}"
        )));
    }
    Ok(())
}

/// `count` vectors of `m` i.i.d. uniform indices.
pub fn sample_qps(m: usize, k: u32, count: usize, rng: &mut impl Rng) -> Result<Vec<QpsVector>> {
    check_bits(k)?;
    let levels = 1u32 << k;
    Ok((0..count)
        .map(|_| QpsVector {
            indices: (0..m).map(|_| rng.random_range(0..levels) as u16).collect(),
            k,
        })
        .collect())
}

/// `(m, 1)` tensor of normalized values.
pub fn normalize(q: &QpsVector) -> Tensor {
    Tensor::new(vec![q.len(), 1], q.normalized()).expect("consistent shape")
}

/// Nearest grid index of one value: `round(v·2^k) mod 2^k`, halves rounding up.
pub fn requantize_value(v: f64, k: u32) -> u16 {
    let levels = 1i64 << k;
    let idx = (v * levels as f64 + 0.5).floor() as i64;
    idx.rem_euclid(levels) as u16
}

pub fn requantize(values: &[f64], k: u32) -> Result<QpsVector> {
    check_bits(k)?;
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "cannot requantize non-finite value {bad}"
        )));
    }
    Ok(QpsVector {
        indices: values.iter().map(|&v| requantize_value(v, k)).collect(),
        k,
    })
}

/// Feedback link `gain·code + n`. `snr_db: None` is noiseless.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSpec {
    pub gain: f64,
    pub snr_db: Option<f64>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec::awgn(20.0)
    }
}

impl ChannelSpec {
    pub fn noiseless() -> Self {
        ChannelSpec {
            gain: 1.0,
            snr_db: None,
        }
    }

    pub fn awgn(snr_db: f64) -> Self {
        ChannelSpec {
            gain: 1.0,
            snr_db: Some(snr_db),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gain.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "channel gain {} is not finite",
                self.gain
            )));
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "SNR {s} dB is not finite; use the noiseless channel instead"
                )));
            }
        }
        Ok(())
    }

    /// Noise for a batch of codes laid out sample-major (first axis). Each
    /// sample's noise variance is its own mean code power over the linear
    /// SNR. Returns zeros for the noiseless channel.
    pub fn noise(&self, code: &Tensor, rng: &mut impl Rng) -> Result<Vec<f64>> {
        self.validate()?;
        let Some(snr_db) = self.snr_db else {
            return Ok(vec![0.0; code.len()]);
        };
        let per_sample = sample_len(code);
        let snr = 10f64.powf(snr_db / 10.0);
        let mut out = Vec::with_capacity(code.len());
        for sample in code.data().chunks(per_sample) {
            let power = sample.iter().map(|v| v * v).sum::<f64>() / sample.len() as f64;
            if power == 0.0 {
                return Err(Error::ZeroSignalPower);
            }
            let sigma = (power / snr).sqrt();
            out.extend((0..sample.len()).map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            }));
        }
        Ok(out)
    }

    /// `gain·code + n` as a new tensor.
    pub fn apply(&self, code: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        if code.is_empty() {
            return Err(Error::InvalidShape {
                op: "apply_channel",
                msg: "empty code".into(),
            });
        }
        let noise = self.noise(code, rng)?;
        let data = code
            .data()
            .iter()
            .zip(noise)
            .map(|(c, n)| self.gain * c + n)
            .collect();
        Tensor::new(code.shape().to_vec(), data)
    }
}

/// Elements per sample: everything past the first axis, or the whole tensor
/// when it is rank 1.
fn sample_len(t: &Tensor) -> usize {
    match t.shape() {
        [] => 1,
        [n] => *n,
        [b, ..] => t.len() / b.max(&1),
    }
}
