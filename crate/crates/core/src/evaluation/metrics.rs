use rand::Rng;

use crate::autodiff::Tape;
use crate::channel::{requantize_value, ChannelSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;

/// Reported in place of −∞ dB for exact reconstructions.
pub const NMSE_DB_FLOOR: f64 = -100.0;

/// `‖θ − θ̂‖² / ‖θ‖²` for one sample.
pub fn nmse_sample(theta: &[f64], theta_hat: &[f64]) -> Result<f64> {
    if theta.len() != theta_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "nmse",
            lhs: vec![theta.len()],
            rhs: vec![theta_hat.len()],
        });
    }
    let reference: f64 = theta.iter().map(|v| v * v).sum();
    if reference == 0.0 {
        return Err(Error::ZeroReference);
    }
    let err: f64 = theta
        .iter()
        .zip(theta_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(err / reference)
}

/// Mean of per-sample NMSE over consecutive samples of length `m`.
pub fn nmse(theta: &[f64], theta_hat: &[f64], m: usize) -> Result<f64> {
    if m == 0 || theta.len() != theta_hat.len() || theta.len() % m != 0 {
        return Err(Error::ShapeMismatch {
            op: "nmse",
            lhs: vec![theta.len()],
            rhs: vec![theta_hat.len()],
        });
    }
    let n = theta.len() / m;
    let mut total = 0.0;
    for (a, b) in theta.chunks(m).zip(theta_hat.chunks(m)) {
        total += nmse_sample(a, b)?;
    }
    Ok(total / n as f64)
}

/// `10·log10(linear)`, floored at [`NMSE_DB_FLOOR`].
pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        NMSE_DB_FLOOR
    } else {
        (10.0 * linear.log10()).max(NMSE_DB_FLOOR)
    }
}

/// Fraction of positions whose requantized estimate equals the index.
pub fn accuracy(theta_hat: &[f64], indices: &[u16], k: u32) -> Result<f64> {
    if theta_hat.len() != indices.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: vec![indices.len()],
            rhs: vec![theta_hat.len()],
        });
    }
    if indices.is_empty() {
        return Ok(0.0);
    }
    let hits = theta_hat
        .iter()
        .zip(indices)
        .filter(|(&v, &i)| requantize_value(v, k) == i)
        .count();
    Ok(hits as f64 / indices.len() as f64)
}

/// Aggregate reconstruction quality over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Mean squared error in normalized space.
    pub loss: f64,
    pub nmse: f64,
    pub accuracy: f64,
    pub samples: usize,
}

impl Metrics {
    pub fn nmse_db(&self) -> f64 {
        to_db(self.nmse)
    }
}

/// Runs every sample of `data` through encoder, channel and decoder in
/// chunks of `chunk` samples, drawing noise from `rng` in sample order.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    channel: &ChannelSpec,
    rng: &mut impl Rng,
    chunk: usize,
) -> Result<Metrics> {
    let n = data.len();
    let m = data.m;
    let (mut sq, mut nmse_sum, mut hits) = (0.0, 0.0, 0.0);
    let rows: Vec<usize> = (0..n).collect();
    for part in rows.chunks(chunk.max(1)) {
        let x = data.batch(part);
        let tape = Tape::new();
        let cx = model.store.bind(&tape, false);
        let out = model.transmit(&cx, tape.constant(&x), channel, rng)?.data();
        for (j, &r) in part.iter().enumerate() {
            let hat = &out[j * m..(j + 1) * m];
            let theta = &x.data()[j * m..(j + 1) * m];
            sq += theta
                .iter()
                .zip(hat)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            nmse_sum += nmse_sample(theta, hat)?;
            hits += accuracy(hat, data.indices(r), data.k)? * m as f64;
        }
    }
    let denom = n.max(1) as f64;
    Ok(Metrics {
        loss: sq / (denom * m as f64),
        nmse: nmse_sum / denom,
        accuracy: hits / (denom * m as f64),
        samples: n,
    })
}
