//! Run configuration: profile defaults, then a `key = value` file, then
//! command-line flags.

use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use psfc::config::KeyValues;
use psfc::models::ModelConfig;
use psfc::training::TrainConfig;
use psfc::Result;

/// Keys a run file may hold besides the training and model keys.
pub const OUTPUT_KEYS: [&str; 1] = ["out_dir"];

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Profile {
    /// 8192/2048 samples, 50 epochs.
    Desk,
    /// 128000/32000 samples, 1000 epochs.
    #[default]
    Paper,
}

impl Profile {
    pub fn base(self) -> TrainConfig {
        match self {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Run file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "gapscn|sgapscn")]
    pub arch: Option<String>,
    /// 1/2, 1/4 or 1/8.
    #[arg(long)]
    pub cr: Option<String>,
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Bottleneck ratio of the SE, CBAM and TSE excitation layers.
    #[arg(long)]
    pub reduction: Option<usize>,
    /// Replace every GDN/IGDN stage by the identity.
    #[arg(long)]
    pub no_gdn: bool,
}

impl ModelArgs {
    fn file(&self) -> Result<KeyValues> {
        let Some(path) = &self.config else {
            return Ok(KeyValues::new());
        };
        let kv = KeyValues::parse(&fs::read_to_string(path)?)?;
        let mut known = TrainConfig::known_keys();
        known.extend(OUTPUT_KEYS);
        kv.check_known(&known)?;
        Ok(kv)
    }

    fn flags(&self, kv: &mut KeyValues) {
        let pairs = [
            ("architecture", self.arch.clone()),
            ("cr", self.cr.clone()),
            ("attention", self.attention.clone()),
            ("width", self.width.map(|v| v.to_string())),
            ("m", self.m.map(|v| v.to_string())),
            ("reduction", self.reduction.map(|v| v.to_string())),
            ("gdn", self.no_gdn.then(|| "false".to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                kv.set(k, v);
            }
        }
    }

    /// Model settings from the file and flags over `base`.
    pub fn resolve(&self, base: ModelConfig) -> Result<ModelConfig> {
        let mut kv = self.file()?;
        self.flags(&mut kv);
        ModelConfig::read_kv(&kv, base)
    }
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub val_count: Option<usize>,
    /// Training SNR in dB, or `inf`.
    #[arg(long)]
    pub train_snr: Option<String>,
    /// Validation SNR in dB, or `inf`.
    #[arg(long)]
    pub val_snr: Option<String>,
}

pub struct Resolved {
    pub config: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    /// Profile defaults, then `stored` (a resumed checkpoint's settings),
    /// then the run file, then flags.
    pub fn resolve(&self, stored: Option<&KeyValues>) -> Result<Resolved> {
        let mut kv = KeyValues::new();
        if let Some(s) = stored {
            let known = TrainConfig::known_keys();
            for (k, v) in s.iter().filter(|(k, _)| known.contains(k)) {
                kv.set(k, v);
            }
        }
        let file = self.model.file()?;
        let out_dir = file.get("out_dir").map(PathBuf::from);
        for (k, v) in file.iter().filter(|(k, _)| !OUTPUT_KEYS.contains(k)) {
            kv.set(k, v);
        }
        self.model.flags(&mut kv);
        let pairs = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("micro_batch", self.micro_batch.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("train_count", self.train_count.map(|v| v.to_string())),
            ("val_count", self.val_count.map(|v| v.to_string())),
            ("train_snr_db", self.train_snr.clone()),
            ("val_snr_db", self.val_snr.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                kv.set(k, v);
            }
        }
        let config = TrainConfig::read_kv(&kv, self.profile.base())?;
        Ok(Resolved { config, out_dir })
    }
}
