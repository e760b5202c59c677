//! Adam training with per-step channel noise, deterministic micro-batch
//! reduction and resumable state.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::channel::ChannelSpec;
use crate::checkpoint::Checkpoint;
use crate::config::{format_snr, parse_snr, KeyValues, MODEL_KEYS};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, to_db, Metrics};
use crate::models::{Model, ModelConfig};
use crate::params::{BufferUpdate, ParamStore};
use crate::rng::{stream, streams};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub train_snr_db: Option<f64>,
    /// SNR of the fixed validation noise.
    pub val_snr_db: Option<f64>,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
    /// Samples per forward/backward pass; batches are split into chunks of
    /// this size and their gradients summed in chunk order.
    pub micro_batch: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 1000,
            learning_rate: 1e-4,
            train_snr_db: Some(20.0),
            val_snr_db: Some(20.0),
            train_count: 128_000,
            val_count: 32_000,
            seed: 0,
            micro_batch: 32,
            model: ModelConfig::default(),
        }
    }
}

pub const TRAIN_KEYS: [&str; 9] = [
    "batch_size",
    "epochs",
    "learning_rate",
    "train_snr_db",
    "val_snr_db",
    "train_count",
    "val_count",
    "seed",
    "micro_batch",
];

impl TrainConfig {
    /// 8192/2048 samples, 50 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 50,
            train_count: 8192,
            val_count: 2048,
            ..TrainConfig::default()
        }
    }

    /// 128000/32000 samples, 1000 epochs.
    pub fn paper() -> Self {
        TrainConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("train_count", self.train_count),
            ("val_count", self.val_count),
            ("micro_batch", self.micro_batch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("`{k}` must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        ChannelSpec::awgn(self.train_snr_db.unwrap_or(0.0)).validate()?;
        ChannelSpec::awgn(self.val_snr_db.unwrap_or(0.0)).validate()?;
        self.model.validate()
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        self.model.write_kv(kv);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("learning_rate", self.learning_rate);
        kv.set("train_snr_db", format_snr(self.train_snr_db));
        kv.set("val_snr_db", format_snr(self.val_snr_db));
        kv.set("train_count", self.train_count);
        kv.set("val_count", self.val_count);
        kv.set("seed", self.seed);
        kv.set("micro_batch", self.micro_batch);
    }

    /// Reads training and model keys, falling back to `base`.
    pub fn read_kv(kv: &KeyValues, base: TrainConfig) -> Result<Self> {
        let snr = |key: &str, fallback| kv.get(key).map_or(Ok(fallback), parse_snr);
        let cfg = TrainConfig {
            batch_size: kv.parsed("batch_size")?.unwrap_or(base.batch_size),
            epochs: kv.parsed("epochs")?.unwrap_or(base.epochs),
            learning_rate: kv.parsed("learning_rate")?.unwrap_or(base.learning_rate),
            train_snr_db: snr("train_snr_db", base.train_snr_db)?,
            val_snr_db: snr("val_snr_db", base.val_snr_db)?,
            train_count: kv.parsed("train_count")?.unwrap_or(base.train_count),
            val_count: kv.parsed("val_count")?.unwrap_or(base.val_count),
            seed: kv.parsed("seed")?.unwrap_or(base.seed),
            micro_batch: kv.parsed("micro_batch")?.unwrap_or(base.micro_batch),
            model: ModelConfig::read_kv(kv, base.model)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key understood by [`TrainConfig::read_kv`].
    pub fn known_keys() -> Vec<&'static str> {
        MODEL_KEYS
            .iter()
            .chain(TRAIN_KEYS.iter())
            .copied()
            .collect()
    }

    pub fn train_channel(&self) -> ChannelSpec {
        ChannelSpec {
            gain: 1.0,
            snr_db: self.train_snr_db,
        }
    }

    pub fn val_channel(&self) -> ChannelSpec {
        ChannelSpec {
            gain: 1.0,
            snr_db: self.val_snr_db,
        }
    }
}

/// Mean over all elements of `(θ̂ − θ)²`.
pub fn mse_loss<'t>(theta_hat: Var<'t>, theta: Var<'t>) -> Result<Var<'t>> {
    if theta_hat.shape() != theta.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: theta_hat.shape(),
            rhs: theta.shape(),
        });
    }
    let d = theta_hat.sub(theta)?;
    Ok(d.mul(d)?.mean())
}

/// First and second moments for each trainable tensor, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let trainable: Vec<_> = store.iter().filter(|p| p.trainable).collect();
        AdamState {
            names: trainable.iter().map(|p| p.name.clone()).collect(),
            m: trainable
                .iter()
                .map(|p| vec![0.0; p.tensor.len()])
                .collect(),
            v: trainable
                .iter()
                .map(|p| vec![0.0; p.tensor.len()])
                .collect(),
            t: 0,
        }
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, moments) in [("adam.m", &self.m), ("adam.v", &self.v)] {
            for (name, data) in self.names.iter().zip(moments) {
                out.push((format!("{prefix}.{name}"), Tensor::from_vec(data.clone())));
            }
        }
        out
    }

    /// Rebuilds the moments for `store` from checkpoint records.
    pub fn from_checkpoint(store: &ParamStore, ck: &Checkpoint) -> Result<Self> {
        let mut state = AdamState::new(store);
        state.t = ck.config.parsed("adam.step")?.unwrap_or(0);
        for (i, name) in state.names.iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut state.m[i]), ("adam.v", &mut state.v[i])] {
                let key = format!("{prefix}.{name}");
                let t = ck
                    .state_tensor(&key)
                    .ok_or_else(|| Error::Format(format!("missing optimizer record `{key}`")))?;
                if t.len() != slot.len() {
                    return Err(Error::Format(format!(
                        "optimizer record `{key}` has wrong size"
                    )));
                }
                slot.copy_from_slice(t.data());
            }
        }
        for (name, _) in &ck.state {
            let known = ["adam.m.", "adam.v."]
                .iter()
                .filter_map(|p| name.strip_prefix(p))
                .chain(name.strip_prefix("best."))
                .any(|n| store.by_name(n).is_some());
            if !known {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update from the gradients held in `store`, then
/// the parameter projections. Parameters without a gradient are treated as
/// having a zero gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    for p in store.iter().filter(|p| p.trainable) {
        if let Some(g) = &p.tensor.grad {
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!(
                    "{} (element {bad}: {})",
                    p.name, g[bad]
                )));
            }
        }
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let mut i = 0;
    for p in store.iter_mut().filter(|p| p.trainable) {
        debug_assert_eq!(state.names[i], p.name);
        let grad = p.tensor.grad.take();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.tensor.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            data[j] -= lr * mh / (vh.sqrt() + ADAM_EPSILON);
        }
        i += 1;
    }
    store.project();
    Ok(())
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_nmse_db: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy,val_nmse_db";

/// Floats use the shortest representation that parses back exactly.
pub fn history_csv(rows: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{:?},{:?},{:?},{:?}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.val_nmse_db
        )
        .expect("writing to a string");
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Format("missing history header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad history row `{l}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                val_accuracy: num(3)?,
                val_nmse_db: num(4)?,
            })
        })
        .collect()
}

/// Loss, gradients and batch statistics of one chunk.
struct ChunkResult {
    loss: f64,
    grads: Vec<Vec<f64>>,
    updates: Vec<BufferUpdate>,
}

fn chunk_pass(model: &Model, x: &Tensor, channel: &ChannelSpec, seed: u64) -> Result<ChunkResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let cx = model.store.bind(&tape, true);
    let target = tape.constant(x);
    let out = model.transmit(&cx, target, channel, &mut rng)?;
    let loss = mse_loss(out, target)?;
    let grads = tape.backward(loss)?;
    let per_param = model
        .store
        .iter()
        .zip(cx.param_vars())
        .filter(|(p, _)| p.trainable)
        .map(|(_, v)| grads.data(*v).expect("trainable").into_owned())
        .collect();
    Ok(ChunkResult {
        loss: loss.item(),
        grads: per_param,
        updates: cx.take_buffer_updates(),
    })
}

/// Worker count from `PSFC_THREADS`, default 1.
pub fn worker_count() -> usize {
    std::env::var("PSFC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn run_chunks(
    model: &Model,
    chunks: &[(Tensor, u64)],
    channel: &ChannelSpec,
    threads: usize,
) -> Result<Vec<ChunkResult>> {
    if threads <= 1 || chunks.len() <= 1 {
        return chunks
            .iter()
            .map(|(x, s)| chunk_pass(model, x, channel, *s))
            .collect();
    }
    let per = chunks.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                scope.spawn(move || {
                    group
                        .iter()
                        .map(|(x, s)| chunk_pass(model, x, channel, *s))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(chunks.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Training loop state. Everything that influences later epochs lives here
/// and in the checkpoint, so a resumed run continues bitwise.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub train: Dataset,
    pub val: Dataset,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_val_loss: Option<f64>,
    best: Option<ParamStore>,
    threads: usize,
}

impl Trainer {
    /// Fresh model and datasets drawn from the config seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (m, k) = (config.model.m, config.model.k);
        let train = Dataset::generate(
            m,
            k,
            config.train_count,
            &mut stream(config.seed, streams::TRAIN_DATA),
        )?;
        let val = Dataset::generate(
            m,
            k,
            config.val_count,
            &mut stream(config.seed, streams::VAL_DATA),
        )?;
        Self::with_data(config, train, val)
    }

    pub fn with_data(config: TrainConfig, train: Dataset, val: Dataset) -> Result<Self> {
        config.validate()?;
        for d in [&train, &val] {
            if d.m != config.model.m || d.k != config.model.k {
                return Err(Error::InvalidConfig(format!(
                    "dataset has m={} k={}, model expects m={} k={}",
                    d.m, d.k, config.model.m, config.model.k
                )));
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidConfig(
                "empty training or validation set".into(),
            ));
        }
        let model = Model::new(config.model, config.seed)?;
        let adam = AdamState::new(&model.store);
        Ok(Trainer {
            config,
            model,
            adam,
            train,
            val,
            epoch: 0,
            history: Vec::new(),
            best_val_loss: None,
            best: None,
            threads: worker_count(),
        })
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    /// Runs until `config.epochs` epochs are complete.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<&[EpochRecord]> {
        while self.epoch < self.config.epochs {
            let rec = self.run_epoch()?;
            on_epoch(&rec);
        }
        Ok(&self.history)
    }

    /// One pass over the shuffled training set followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let e = self.epoch;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream(seed, streams::shuffle(e)));
        let mut noise = stream(seed, streams::train_noise(e));
        let channel = self.config.train_channel();
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let chunks: Vec<(Tensor, u64)> = batch
                .chunks(self.config.micro_batch)
                .map(|rows| (self.train.batch(rows), noise.random()))
                .collect();
            let results = run_chunks(&self.model, &chunks, &channel, self.threads)?;
            let mut batch_loss = 0.0;
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut updates = Vec::new();
            for ((x, _), r) in chunks.iter().zip(results) {
                let w = x.shape()[0] as f64 / batch.len() as f64;
                batch_loss += w * r.loss;
                match &mut grads {
                    None => {
                        grads = Some(
                            r.grads
                                .into_iter()
                                .map(|g| g.into_iter().map(|v| w * v).collect())
                                .collect(),
                        )
                    }
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(r.grads) {
                            a.iter_mut().zip(g).for_each(|(a, g)| *a += w * g);
                        }
                    }
                }
                updates.extend(r.updates);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: e + 1,
                    loss: batch_loss,
                });
            }
            let grads = grads.expect("non-empty batch");
            for (p, g) in self
                .model
                .store
                .iter_mut()
                .filter(|p| p.trainable)
                .zip(grads)
            {
                p.tensor.grad = Some(g);
            }
            adam_step(
                &mut self.model.store,
                &mut self.adam,
                self.config.learning_rate,
            )?;
            self.model.store.apply_buffer_updates(updates);
            loss_sum += batch_loss * batch.len() as f64;
        }
        let val = self.validate()?;
        let rec = EpochRecord {
            epoch: e + 1,
            train_loss: loss_sum / self.train.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            val_nmse_db: to_db(val.nmse),
        };
        if self.best_val_loss.is_none_or(|b| val.loss < b) {
            self.best_val_loss = Some(val.loss);
            self.best = Some(self.model.store.clone());
        }
        self.history.push(rec);
        self.epoch += 1;
        Ok(rec)
    }

    /// Metrics on the validation set with its fixed noise realization.
    pub fn validate(&self) -> Result<Metrics> {
        evaluate(
            &self.model,
            &self.val,
            &self.config.val_channel(),
            &mut stream(self.config.seed, streams::VAL_NOISE),
            self.config.micro_batch,
        )
    }

    /// The best-validation parameters, or the current ones before any epoch.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(best) = &self.best {
            m.store = best.clone();
        }
        m
    }

    /// Model-only checkpoint of the best parameters.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.best_model());
        self.config.write_kv(&mut ck.config);
        ck.config.set("trainer.epoch", self.epoch);
        ck
    }

    /// Everything needed to resume: current parameters, optimizer
    /// moments, best parameters, history and counters.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        self.config.write_kv(&mut ck.config);
        ck.config.set("trainer.epoch", self.epoch);
        ck.config.set("adam.step", self.adam.t);
        if let Some(b) = self.best_val_loss {
            ck.config.set("trainer.best_val_loss", format!("{b:?}"));
        }
        for (i, r) in self.history.iter().enumerate() {
            ck.config.set(
                &format!("history.{}", i + 1),
                format!(
                    "{:?},{:?},{:?},{:?}",
                    r.train_loss, r.val_loss, r.val_accuracy, r.val_nmse_db
                ),
            );
        }
        ck.state = self.adam.to_records();
        if let Some(best) = &self.best {
            ck.state.extend(best.iter().map(|p| {
                (
                    format!("best.{}", p.name),
                    Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec())
                        .expect("valid tensor"),
                )
            }));
        }
        ck
    }

    /// Continues from a [`Trainer::state_checkpoint`]. `config` supplies the
    /// epoch budget; its remaining fields must match the checkpoint's.
    pub fn resume(config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let stored = TrainConfig::read_kv(&ck.config, config.clone())?;
        if stored.model != config.model
            || stored.seed != config.seed
            || stored.batch_size != config.batch_size
            || stored.micro_batch != config.micro_batch
            || stored.train_count != config.train_count
            || stored.val_count != config.val_count
        {
            return Err(Error::InvalidConfig(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let mut t = Trainer::new(config)?;
        ck.load_into(&mut t.model)?;
        t.adam = AdamState::from_checkpoint(&t.model.store, ck)?;
        t.epoch = ck.config.parsed("trainer.epoch")?.unwrap_or(0);
        t.best_val_loss = ck.config.parsed("trainer.best_val_loss")?;
        for i in 1..=t.epoch {
            let key = format!("history.{i}");
            let row = ck
                .config
                .get(&key)
                .ok_or_else(|| Error::Format(format!("missing `{key}`")))?;
            let mut parsed = parse_history(&format!("{HISTORY_HEADER}\n{i},{row}\n"))?;
            t.history.push(parsed.remove(0));
        }
        let best: Vec<_> = ck
            .state
            .iter()
            .filter_map(|(n, v)| n.strip_prefix("best.").map(|n| (n, v)))
            .collect();
        if !best.is_empty() {
            let mut store = t.model.store.clone();
            for (name, v) in best {
                store.assign(name, v.data())?;
            }
            t.best = Some(store);
        }
        Ok(t)
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        fs::write(path, history_csv(&self.history))?;
        Ok(())
    }
}
