//! Flat storage for many phase vectors and its binary file format.
//!
//! File layout: the magic `QPS1`, then `m`, `k` and `count` as
//! little-endian `u32`, then `count·m` index bytes. Only `k ≤ 8` fits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::channel::{check_bits, QpsVector};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"QPS1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub m: usize,
    pub k: u32,
    /// Row-major `count × m` indices.
    indices: Vec<u16>,
}

impl Dataset {
    pub fn new(m: usize, k: u32, indices: Vec<u16>) -> Result<Self> {
        check_bits(k)?;
        if m == 0 || indices.len() % m != 0 {
            return Err(Error::Format(format!(
                "{} indices do not form vectors of length {m}",
                indices.len()
            )));
        }
        let levels = 1u32 << k;
        if indices.iter().any(|&i| u32::from(i) >= levels) {
            return Err(Error::Format(format!("index out of range for {k} bits")));
        }
        Ok(Dataset { m, k, indices })
    }

    /// `count` vectors of i.i.d. uniform indices.
    pub fn generate(m: usize, k: u32, count: usize, rng: &mut impl Rng) -> Result<Self> {
        check_bits(k)?;
        let levels = 1u32 << k;
        let indices = (0..m * count)
            .map(|_| rng.random_range(0..levels) as u16)
            .collect();
        Dataset::new(m, k, indices)
    }

    pub fn from_vectors(vectors: &[QpsVector]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Format("no vectors".into()))?;
        if vectors
            .iter()
            .any(|v| v.len() != first.len() || v.k != first.k)
        {
            return Err(Error::Format(
                "vectors differ in length or resolution".into(),
            ));
        }
        let indices = vectors
            .iter()
            .flat_map(|v| v.indices.iter().copied())
            .collect();
        Dataset::new(first.len(), first.k, indices)
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self, i: usize) -> &[u16] {
        &self.indices[i * self.m..(i + 1) * self.m]
    }

    pub fn vector(&self, i: usize) -> QpsVector {
        QpsVector {
            indices: self.indices(i).to_vec(),
            k: self.k,
        }
    }

    /// Normalized values of the selected vectors as a `(rows, m, 1)` tensor.
    pub fn batch(&self, rows: &[usize]) -> Tensor {
        let scale = 1.0 / (1u32 << self.k) as f64;
        let data = rows
            .iter()
            .flat_map(|&r| self.indices(r).iter().map(move |&i| f64::from(i) * scale))
            .collect();
        Tensor::new(vec![rows.len(), self.m, 1], data).expect("consistent shape")
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.k > 8 {
            return Err(Error::Format(format!(
                "{}-bit indices do not fit the byte-per-index format",
                self.k
            )));
        }
        let header = |v: usize| -> Result<[u8; 4]> {
            u32::try_from(v)
                .map(u32::to_le_bytes)
                .map_err(|_| Error::Format(format!("{v} exceeds the header field range")))
        };
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&header(self.m)?)?;
        w.write_all(&self.k.to_le_bytes())?;
        w.write_all(&header(self.len())?)?;
        let bytes: Vec<u8> = self.indices.iter().map(|&i| i as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated dataset header: {e}")))?;
        if &header[..4] != DATASET_MAGIC {
            return Err(Error::Format(
                "not a phase-vector dataset (bad magic)".into(),
            ));
        }
        let field = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        let (m, k, count) = (field(4) as usize, field(8), field(12) as usize);
        if k == 0 || k > 8 {
            return Err(Error::Format(format!(
                "dataset resolution {k} outside 1..=8 bits"
            )));
        }
        let total = m
            .checked_mul(count)
            .ok_or_else(|| Error::Format("dataset size overflows".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != total {
            return Err(Error::Format(format!(
                "expected {total} index bytes, found {}",
                bytes.len()
            )));
        }
        Dataset::new(m, k, bytes.into_iter().map(u16::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::read_from(&mut BufReader::new(File::open(path)?))
    }
}
