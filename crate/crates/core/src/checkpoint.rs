//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian: magic `PSFC`, format version `u32`,
//! config text length `u32` and the `key = value` text, parameter count
//! `u32`, one record per parameter, state record count `u32`, one record per
//! state tensor. A record is name length `u32`, name bytes, rank `u32`, dims
//! as `u64`, then the `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSFC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sanity cap on any single length field read from disk.
const MAX_LEN: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: KeyValues,
    pub params: Vec<(String, Tensor)>,
    /// Optimizer moments and other trainer tensors.
    pub state: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Every tensor of `model` (buffers included) plus its config.
    pub fn from_model(model: &Model) -> Self {
        let mut config = KeyValues::new();
        model.config.write_kv(&mut config);
        Checkpoint {
            config,
            params: model
                .store
                .iter()
                .map(|p| (p.name.clone(), strip(&p.tensor)))
                .collect(),
            state: Vec::new(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::read_kv(&self.config, ModelConfig::default())
    }

    /// Rebuilds the model described by the config and loads every tensor.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config()?, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Overwrites `model`'s tensors. Every stored name must exist in the
    /// model and every model tensor must be stored.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        if self.params.len() != model.store.len() {
            for p in model.store.iter() {
                if !self.params.iter().any(|(n, _)| n == &p.name) {
                    return Err(Error::Format(format!("missing parameter `{}`", p.name)));
                }
            }
        }
        for (name, t) in &self.params {
            let dst = model
                .store
                .by_name(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if dst.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            model.store.assign(name, t.data())?;
        }
        Ok(())
    }

    pub fn state_tensor(&self, name: &str) -> Option<&Tensor> {
        self.state.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let text = self.config.to_text();
        write_u32(w, text.len())?;
        w.write_all(text.as_bytes())?;
        for group in [&self.params, &self.state] {
            write_u32(w, group.len())?;
            for (name, t) in group {
                write_record(w, name, t)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = read_u32(r)? as usize;
        let mut text = vec![0u8; len];
        read_exact(r, &mut text)?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config = KeyValues::parse(&text)?;
        let params = read_group(r)?;
        let state = read_group(r)?;
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn strip(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor")
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_record(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.rank())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_group(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let count = read_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = read_u32(r)?;
        if rank > 8 {
            return Err(Error::Format(format!("record `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = read_u64(r)?;
            if d > MAX_LEN {
                return Err(Error::Format(format!("record `{name}` dim {d} too large")));
            }
            shape.push(d as usize);
        }
        let n = numel(&shape);
        if n as u64 > MAX_LEN {
            return Err(Error::Format(format!("record `{name}` too large")));
        }
        let mut bytes = vec![0u8; n * 8];
        read_exact(r, &mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
