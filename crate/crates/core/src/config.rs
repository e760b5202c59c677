//! Flat `key = value` configuration text with `#` comments.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::{AttentionKind, AttentionOptions};
use crate::error::{Error, Result};
use crate::models::{Architecture, CompressionRatio, ModelConfig};

/// Ordered key/value pairs; setting an existing key replaces its value in
/// place.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses config text. Duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::InvalidConfig(format!("line {}: empty key", n + 1)));
            }
            if kv.get(key).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
            kv.set(key, value.trim());
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// Overlays every entry of `other`.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Typed value of `key`, or `None` when absent.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::InvalidConfig(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    /// Fails on the first key outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::InvalidConfig(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").expect("writing to a string");
        }
        s
    }
}

/// Parses `none`/`inf` as absent (noiseless), anything else as a number.
pub fn parse_snr(v: &str) -> Result<Option<f64>> {
    match v.trim() {
        "none" | "inf" | "noiseless" => Ok(None),
        s => s
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .map(Some)
            .ok_or_else(|| Error::InvalidConfig(format!("invalid SNR `{s}`"))),
    }
}

pub fn format_snr(snr: Option<f64>) -> String {
    match snr {
        Some(v) => v.to_string(),
        None => "inf".to_string(),
    }
}

pub const MODEL_KEYS: [&str; 9] = [
    "m",
    "k",
    "cr",
    "width",
    "attention",
    "architecture",
    "gdn",
    "reduction",
    "tse_tile",
];

impl ModelConfig {
    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("m", self.m);
        kv.set("k", self.k);
        kv.set("cr", self.cr);
        kv.set("width", self.width);
        kv.set("attention", self.attention);
        kv.set("architecture", self.architecture);
        kv.set("gdn", self.gdn);
        kv.set("reduction", self.attention_options.reduction);
        kv.set(
            "tse_tile",
            self.attention_options
                .tse_tile
                .map_or("auto".to_string(), |t| t.to_string()),
        );
    }

    /// Reads model keys, falling back to `base` for absent ones.
    pub fn read_kv(kv: &KeyValues, base: ModelConfig) -> Result<Self> {
        let tse_tile = match kv.get("tse_tile") {
            None => base.attention_options.tse_tile,
            Some("auto") => None,
            Some(_) => kv.parsed("tse_tile")?,
        };
        let cfg = ModelConfig {
            m: kv.parsed("m")?.unwrap_or(base.m),
            k: kv.parsed("k")?.unwrap_or(base.k),
            cr: kv.parsed::<CompressionRatio>("cr")?.unwrap_or(base.cr),
            width: kv.parsed("width")?.unwrap_or(base.width),
            attention: kv
                .parsed::<AttentionKind>("attention")?
                .unwrap_or(base.attention),
            architecture: kv
                .parsed::<Architecture>("architecture")?
                .unwrap_or(base.architecture),
            gdn: kv.parsed("gdn")?.unwrap_or(base.gdn),
            attention_options: AttentionOptions {
                reduction: kv
                    .parsed("reduction")?
                    .unwrap_or(base.attention_options.reduction),
                tse_tile,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
