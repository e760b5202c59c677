//! `psfc`: data generation, training, evaluation, attention comparison and
//! model inspection.

mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use psfc::checkpoint::Checkpoint;
use psfc::config::parse_snr;
use psfc::data::Dataset;
use psfc::evaluation::{
    compare_attention, comparison_csv, evaluate, sweep_snr, to_db, Variant, REFERENCE_ACCURACY,
};
use psfc::models::{Architecture, CompressionRatio, Model, ModelConfig};
use psfc::rng::{stream, streams};
use psfc::training::{Trainer, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
use psfc::Error;
use sha2::{Digest, Sha256};

use run_config::{ModelArgs, Overrides};

#[derive(Parser)]
#[command(
    name = "psfc",
    version,
    about = "Phase-shift feedback compression with attention autoencoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write uniformly sampled phase-index vectors in the QPS1 format.
    GenData {
        #[arg(long, default_value_t = 128)]
        m: usize,
        #[arg(long, default_value_t = 8)]
        k: u32,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoints and history.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Directory for best.psfc, state.psfc and history.csv [default: run].
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Path of the best-validation checkpoint (default: <out-dir>/best.psfc).
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        /// Continue from a state checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sweep test SNRs for a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated SNRs in dB; `inf` is the noiseless channel.
        #[arg(long, default_value = "0,5,10,15,20,25")]
        snrs: String,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_svg: Option<PathBuf>,
    },
    /// Train several attention variants on one budget and tabulate them.
    CompareAttention {
        /// Model settings; the compression ratio defaults to 1/4 here.
        #[command(flatten)]
        model: ModelArgs,
        #[arg(
            long,
            default_value = "global,global-pooling,global-no-joint,no-gdn,tse,triplet"
        )]
        variants: String,
        #[arg(long, value_enum, default_value_t = Budget::Tiny)]
        budget: Budget,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long, default_value = "comparison.csv")]
        out: PathBuf,
    },
    /// Describe a checkpoint, or a freshly built model when none is given.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Budget {
    /// 512/256 samples, 2 epochs.
    Tiny,
    Desk,
    Paper,
}

/// Failure with its process exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Divergence { .. } | Error::NonFiniteGradient(_) => 1,
            Error::InvalidConfig(_) | Error::UnknownVariant(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    psfc::runtime::tune_allocator();
    let result = match cli.command {
        Command::GenData {
            m,
            k,
            count,
            seed,
            out,
        } => gen_data(m, k, count, seed, &out),
        Command::Train {
            overrides,
            out_dir,
            out_checkpoint,
            resume,
        } => train(&overrides, out_dir, out_checkpoint, resume.as_deref()),
        Command::Eval {
            checkpoint,
            snrs,
            count,
            seed,
            out_csv,
            out_svg,
        } => eval(&checkpoint, &snrs, count, seed, out_csv, out_svg),
        Command::CompareAttention {
            model,
            variants,
            budget,
            seeds,
            out,
        } => compare(&model, &variants, budget, &seeds, &out),
        Command::Inspect { checkpoint, model } => inspect(checkpoint.as_deref(), &model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Prefixes the failing path to an error's message.
fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        Failure {
            message: format!("{}: {}", path.display(), f.message),
            ..f
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn gen_data(m: usize, k: u32, count: usize, seed: u64, out: &Path) -> CmdResult {
    if k > 8 {
        return Err(invalid(format!(
            "the file format holds at most 8 bits, got {k}"
        )));
    }
    if m == 0 {
        return Err(invalid("m must be positive"));
    }
    if count == 0 {
        eprintln!("warning: count is 0; writing a header-only file");
    }
    let ds = Dataset::generate(m, k, count, &mut stream(seed, streams::GENERATED_DATA))?;
    let mut bytes = Vec::new();
    ds.write_to(&mut bytes)?;
    fs::write(out, &bytes).map_err(|e| at(out)(e.into()))?;
    println!(
        "wrote {count} vectors (m = {m}, k = {k}) to {}",
        out.display()
    );
    println!("sha256 {}", hex_digest(&bytes));
    Ok(())
}

fn banner(config: &psfc::training::TrainConfig) {
    println!("effective configuration:");
    let mut kv = psfc::config::KeyValues::new();
    config.write_kv(&mut kv);
    for (k, v) in kv.iter() {
        println!("  {k} = {v}");
    }
    println!("  optimizer = adam (beta1 {ADAM_BETA1}, beta2 {ADAM_BETA2}, eps {ADAM_EPSILON})");
    println!("  loss = mse");
    println!("  threads = {}", psfc::training::worker_count());
}

fn train(
    overrides: &Overrides,
    out_dir: Option<PathBuf>,
    out_checkpoint: Option<PathBuf>,
    resume: Option<&Path>,
) -> CmdResult {
    let resumed = resume
        .map(|p| Checkpoint::load(p).map_err(at(p)))
        .transpose()?;
    let resolved = overrides.resolve(resumed.as_ref().map(|c| &c.config))?;
    let config = resolved.config;
    let out_dir = out_dir
        .or(resolved.out_dir)
        .unwrap_or_else(|| PathBuf::from("run"));
    let out_dir = out_dir.as_path();
    banner(&config);
    let mut trainer = match &resumed {
        Some(ck) => Trainer::resume(config, ck)?,
        None => Trainer::new(config)?,
    };
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let best_path = out_checkpoint.unwrap_or_else(|| out_dir.join("best.psfc"));
    let state_path = out_dir.join("state.psfc");
    let history_path = out_dir.join("history.csv");
    let total = trainer.config.epochs;
    if trainer.epoch > 0 {
        println!("resuming after epoch {}", trainer.epoch);
    }
    while trainer.epoch < total {
        let rec = match trainer.run_epoch() {
            Ok(r) => r,
            Err(e) => {
                // keep what was learned before the failure
                trainer.write_history(&history_path)?;
                return Err(e.into());
            }
        };
        println!(
            "epoch {}/{total}  train_loss {:.6e}  val_loss {:.6e}  val_accuracy {:.4}  val_nmse {:.2} dB",
            rec.epoch, rec.train_loss, rec.val_loss, rec.val_accuracy, rec.val_nmse_db
        );
        trainer.state_checkpoint().save(&state_path)?;
        trainer.best_checkpoint().save(&best_path)?;
        trainer.write_history(&history_path)?;
    }
    trainer.state_checkpoint().save(&state_path)?;
    trainer.best_checkpoint().save(&best_path)?;
    trainer.write_history(&history_path)?;
    let best = trainer.best_model();
    let cfg = &trainer.config;
    let val = evaluate(
        &best,
        &trainer.val,
        &cfg.val_channel(),
        &mut stream(cfg.seed, streams::VAL_NOISE),
        cfg.micro_batch,
    )?;
    println!(
        "best validation: accuracy {:.6}  nmse {:.3} dB  loss {:.6e}",
        val.accuracy,
        to_db(val.nmse),
        val.loss
    );
    println!("param_count = {}", best.param_count());
    println!("wrote {}", best_path.display());
    println!("wrote {}", state_path.display());
    println!("wrote {}", history_path.display());
    Ok(())
}

fn parse_list<T>(text: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, Failure> {
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| invalid(format!("invalid {what} `{s}`"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(invalid(format!("no {what} given")));
    }
    Ok(items)
}

fn eval(
    checkpoint: &Path,
    snrs: &str,
    count: usize,
    seed: u64,
    out_csv: Option<PathBuf>,
    out_svg: Option<PathBuf>,
) -> CmdResult {
    let snrs = parse_list(snrs, "SNR", |s| parse_snr(s).ok())?;
    if count == 0 {
        return Err(invalid("count must be positive"));
    }
    let ck = Checkpoint::load(checkpoint).map_err(at(checkpoint))?;
    let model = ck.to_model()?;
    let chunk = ck.config.parsed("micro_batch")?.unwrap_or(32);
    let mut report = sweep_snr(&model, &snrs, count, seed, chunk)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    report.model = Some(format!(
        "{} cr={} attention={}",
        model.config.architecture, model.config.cr, model.config.attention
    ));
    print!("{}", report.to_table());
    if let Some(p) = out_csv {
        report.write_csv(&p)?;
        println!("wrote {}", p.display());
    }
    if let Some(p) = out_svg {
        report.write_svg(&p)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn compare(
    model: &ModelArgs,
    variants: &str,
    budget: Budget,
    seeds: &str,
    out: &Path,
) -> CmdResult {
    let variants = parse_list(variants, "variant", |s| s.parse::<Variant>().ok())?;
    let seeds = parse_list(seeds, "seed", |s| s.parse::<u64>().ok())?;
    let mut base = match budget {
        Budget::Tiny => psfc::training::TrainConfig {
            epochs: 2,
            train_count: 512,
            val_count: 256,
            ..psfc::training::TrainConfig::default()
        },
        Budget::Desk => psfc::training::TrainConfig::desk(),
        Budget::Paper => psfc::training::TrainConfig::paper(),
    };
    base.model = model.resolve(ModelConfig {
        cr: CompressionRatio::Quarter,
        ..ModelConfig::default()
    })?;
    banner(&base);
    println!(
        "  variants = {}",
        variants
            .iter()
            .map(|v| v.name())
            .collect::<Vec<_>>()
            .join(",")
    );
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    println!("  seeds = {}", seed_list.join(","));
    let rows = compare_attention(&base, &variants, &seeds, |r| {
        println!(
            "{} seed {}: train_accuracy {:.4}  val_accuracy {:.4}  val_nmse {:.2} dB",
            r.variant.name(),
            r.seed.unwrap_or_default(),
            r.train_accuracy,
            r.val_accuracy,
            r.val_nmse_db
        );
    })?;
    for r in rows.iter().filter(|r| r.seed.is_none()) {
        let reference = REFERENCE_ACCURACY
            .iter()
            .find(|(v, _)| *v == r.variant)
            .map_or(String::new(), |(_, a)| format!("  (reference {a:.4})"));
        println!(
            "{} mean val_accuracy {:.4}{reference}",
            r.variant.name(),
            r.val_accuracy
        );
    }
    fs::write(out, comparison_csv(&rows)).map_err(Error::from)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn shape(dims: &[usize]) -> String {
    dims.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("×")
}

fn inspect(checkpoint: Option<&Path>, args: &ModelArgs) -> CmdResult {
    let (model, config_text) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(at(p))?;
            (ck.to_model()?, ck.config.to_text())
        }
        None => {
            let cfg = args.resolve(ModelConfig::default())?;
            let model = Model::new(cfg, 0)?;
            let mut kv = psfc::config::KeyValues::new();
            cfg.write_kv(&mut kv);
            (model, kv.to_text())
        }
    };
    let cfg = model.config;
    println!("architecture: {}", cfg.architecture);
    println!(
        "compression ratio: {}  attention: {}  width: {}",
        cfg.cr, cfg.attention, cfg.width
    );
    println!();
    println!("{:<10} {:>12} {:>12}", "block", "input", "output");
    let trace = model.shape_trace()?;
    let encoder_rows = 3 + cfg.cr.stages();
    for (i, r) in trace.iter().enumerate() {
        if i == 0 {
            println!("encoder");
        } else if i == encoder_rows {
            println!("decoder");
        }
        println!(
            "{:<10} {:>12} {:>12}",
            r.block,
            shape(&r.input),
            shape(&r.output)
        );
    }
    println!();
    println!("param_count = {}", model.param_count());
    println!("encoder param_count = {}", model.encoder_param_count());
    println!("decoder param_count = {}", model.decoder_param_count());
    // both architectures under the same settings
    let mut counts = Vec::new();
    for arch in [Architecture::Gapscn, Architecture::Sgapscn] {
        let m = Model::new(
            ModelConfig {
                architecture: arch,
                ..cfg
            },
            0,
        )?;
        println!(
            "{arch} param_count = {} (decoder {})",
            m.param_count(),
            m.decoder_param_count()
        );
        counts.push(m.decoder_param_count());
    }
    println!(
        "sgapscn/gapscn decoder ratio = {:.4}",
        counts[1] as f64 / counts[0] as f64
    );
    println!();
    println!("configuration:");
    for line in config_text.lines() {
        println!("  {line}");
    }
    Ok(())
}
