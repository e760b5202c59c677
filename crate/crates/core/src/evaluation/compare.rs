use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::rng::{stream, streams};
use crate::training::{TrainConfig, Trainer};

use super::metrics::{evaluate, to_db};
use super::report::fmt_sig6;

/// A model variant in an attention comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Global,
    GlobalPooling,
    GlobalNoJoint,
    Tse,
    Triplet,
    Se,
    Cbam,
    /// Global attention with GDN/IGDN replaced by the identity.
    NoGdn,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Global,
        Variant::GlobalPooling,
        Variant::GlobalNoJoint,
        Variant::Tse,
        Variant::Triplet,
        Variant::Se,
        Variant::Cbam,
        Variant::NoGdn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Global => "global",
            Variant::GlobalPooling => "global-pooling",
            Variant::GlobalNoJoint => "global-no-joint",
            Variant::Tse => "tse",
            Variant::Triplet => "triplet",
            Variant::Se => "se",
            Variant::Cbam => "cbam",
            Variant::NoGdn => "no-gdn",
        }
    }

    pub fn apply(self, base: ModelConfig) -> ModelConfig {
        let attention = match self {
            Variant::Global | Variant::NoGdn => AttentionKind::Global,
            Variant::GlobalPooling => AttentionKind::GlobalWithPooling,
            Variant::GlobalNoJoint => AttentionKind::GlobalNoJoint,
            Variant::Tse => AttentionKind::Tse,
            Variant::Triplet => AttentionKind::Triplet,
            Variant::Se => AttentionKind::Se,
            Variant::Cbam => AttentionKind::Cbam,
        };
        ModelConfig {
            attention,
            gdn: self != Variant::NoGdn,
            ..base
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Published validation accuracies at CR = 1/4.
pub const REFERENCE_ACCURACY: [(Variant, f64); 6] = [
    (Variant::Global, 0.9410),
    (Variant::Triplet, 0.9354),
    (Variant::Tse, 0.9309),
    (Variant::GlobalPooling, 0.9385),
    (Variant::GlobalNoJoint, 0.9369),
    (Variant::NoGdn, 0.9353),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub variant: Variant,
    /// `None` marks the mean over seeds.
    pub seed: Option<u64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_nmse_db: f64,
}

/// Trains every variant under every seed with the same budget. Returns one
/// row per (variant, seed) followed by one mean row per variant. Train
/// accuracy is measured on the first `val_count` training vectors under the
/// training channel with fixed noise.
pub fn compare_attention(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(&ComparisonRow),
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let config = TrainConfig {
                seed,
                model: variant.apply(base.model),
                ..base.clone()
            };
            let mut trainer = Trainer::new(config)?;
            trainer.run(|_| {})?;
            let best = trainer.best_model();
            let cfg = &trainer.config;
            let val = evaluate(
                &best,
                &trainer.val,
                &cfg.val_channel(),
                &mut stream(seed, streams::VAL_NOISE),
                cfg.micro_batch,
            )?;
            let n = trainer.train.len().min(cfg.val_count);
            let head = crate::data::Dataset::new(
                cfg.model.m,
                cfg.model.k,
                (0..n)
                    .flat_map(|i| trainer.train.indices(i).to_vec())
                    .collect(),
            )?;
            let train = evaluate(
                &best,
                &head,
                &cfg.train_channel(),
                &mut stream(seed, streams::VAL_NOISE),
                cfg.micro_batch,
            )?;
            let row = ComparisonRow {
                variant,
                seed: Some(seed),
                train_accuracy: train.accuracy,
                val_accuracy: val.accuracy,
                val_nmse_db: to_db(val.nmse),
            };
            progress(&row);
            rows.push(row);
        }
    }
    let mut means = Vec::new();
    for &variant in variants {
        if means.iter().any(|r: &ComparisonRow| r.variant == variant) {
            continue;
        }
        let own: Vec<_> = rows.iter().filter(|r| r.variant == variant).collect();
        let n = own.len().max(1) as f64;
        means.push(ComparisonRow {
            variant,
            seed: None,
            train_accuracy: own.iter().map(|r| r.train_accuracy).sum::<f64>() / n,
            val_accuracy: own.iter().map(|r| r.val_accuracy).sum::<f64>() / n,
            val_nmse_db: own.iter().map(|r| r.val_nmse_db).sum::<f64>() / n,
        });
    }
    rows.extend(means);
    Ok(rows)
}

pub const COMPARISON_HEADER: &str = "variant,seed,train_accuracy,val_accuracy,val_nmse_db";

/// CSV with the reference accuracies as leading `#` comments.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("# reference val accuracy at CR=1/4:");
    for (v, a) in REFERENCE_ACCURACY {
        write!(s, " {v}={a:.4}").expect("writing to a string");
    }
    s.push('\n');
    writeln!(s, "{COMPARISON_HEADER}").expect("writing to a string");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.variant,
            r.seed.map_or("mean".to_string(), |s| s.to_string()),
            fmt_sig6(r.train_accuracy),
            fmt_sig6(r.val_accuracy),
            fmt_sig6(r.val_nmse_db)
        )
        .expect("writing to a string");
    }
    s
}

pub fn parse_comparison(text: &str) -> Result<Vec<ComparisonRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(COMPARISON_HEADER) {
        return Err(Error::Format("missing comparison header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("bad comparison row `{l}`"));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(ComparisonRow {
                variant: f[0].parse()?,
                seed: match f[1] {
                    "mean" => None,
                    s => Some(s.parse().map_err(|_| bad())?),
                },
                train_accuracy: num(2)?,
                val_accuracy: num(3)?,
                val_nmse_db: num(4)?,
            })
        })
        .collect()
}
