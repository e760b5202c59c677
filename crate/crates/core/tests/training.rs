mod common;

use proptest::prelude::*;
use psfc::attention::{AttentionKind, AttentionOptions};
use psfc::checkpoint::Checkpoint;
use psfc::models::{CompressionRatio, ModelConfig};
use psfc::params::ParamStore;
use psfc::training::*;
use psfc::{Error, Tape, Tensor};

fn tiny() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 2,
        train_count: 48,
        val_count: 16,
        micro_batch: 8,
        seed: 5,
        model: ModelConfig {
            m: 16,
            width: 4,
            cr: CompressionRatio::Half,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    ck.write_to(&mut out).unwrap();
    out
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    let tape = Tape::new();
    let t = |v: &[f64]| tape.constant(&Tensor::new(vec![1, v.len(), 1], v.to_vec()).unwrap());
    mse_loss(t(a), t(b)).unwrap().item()
}

#[test]
fn mse_loss_examples() {
    let theta = [0.1, 0.4, 0.7, 0.9];
    assert_eq!(mse(&theta, &theta), 0.0);
    let shifted: Vec<f64> = theta.iter().map(|v| v + 0.1).collect();
    assert!((mse(&shifted, &theta) - 0.01).abs() < 1e-15);

    let mut rng = common::rng(3);
    let a = common::uniform(&mut rng, &[4], 0.0, 1.0);
    let b = common::uniform(&mut rng, &[4], 0.0, 1.0);
    let mut hand = 0.0;
    for i in 0..4 {
        hand += (a.data()[i] - b.data()[i]).powi(2);
    }
    assert!((mse(a.data(), b.data()) - hand / 4.0).abs() < 1e-15);

    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![1, 4, 1]));
    let y = tape.constant(&Tensor::zeros(vec![1, 3, 1]));
    assert!(matches!(mse_loss(x, y), Err(Error::ShapeMismatch { .. })));
}

fn scalar_store(value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::scalar(value));
    s
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = scalar_store(0.5);
    let mut state = AdamState::new(&store);
    store.by_name_mut("w").unwrap().grad = Some(vec![1.0]);
    adam_step(&mut store, &mut state, 1e-4).unwrap();
    // m̂ = v̂ = 1 after bias correction
    let expected = 0.5 - 1e-4 * 1.0 / (1.0 + ADAM_EPSILON);
    assert_eq!(store.by_name("w").unwrap().data()[0], expected);
    assert!((0.5 - store.by_name("w").unwrap().data()[0] - 1e-4).abs() < 1e-11);
    assert_eq!(state.t, 1);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut store = scalar_store(0.5);
    let mut state = AdamState::new(&store);
    store.by_name_mut("w").unwrap().grad = Some(vec![0.0]);
    adam_step(&mut store, &mut state, 1e-3).unwrap();
    assert_eq!(store.by_name("w").unwrap().data()[0], 0.5);
    assert_eq!(state.v[0], vec![0.0]);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut store = scalar_store(0.5);
    let mut state = AdamState::new(&store);
    store.by_name_mut("w").unwrap().grad = Some(vec![f64::NAN]);
    match adam_step(&mut store, &mut state, 1e-3) {
        Err(Error::NonFiniteGradient(msg)) => assert!(msg.contains('w')),
        other => panic!("expected NonFiniteGradient, got {other:?}"),
    }
    assert_eq!(store.by_name("w").unwrap().data()[0], 0.5);
}

#[test]
fn adam_projects_bounded_parameters() {
    let mut store = ParamStore::new();
    store.add_bounded("beta", Tensor::scalar(1e-6), 1e-6);
    store.add_bounded("gamma", Tensor::scalar(0.0), 0.0);
    let mut state = AdamState::new(&store);
    for name in ["beta", "gamma"] {
        store.by_name_mut(name).unwrap().grad = Some(vec![1.0]);
    }
    adam_step(&mut store, &mut state, 0.1).unwrap();
    assert_eq!(store.by_name("beta").unwrap().data()[0], 1e-6);
    assert_eq!(store.by_name("gamma").unwrap().data()[0], 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adam_matches_hand_loop(grads in prop::collection::vec(-5.0f64..5.0, 1..12), lr in 1e-5f64..1e-1) {
        let mut store = scalar_store(0.25);
        let mut state = AdamState::new(&store);
        let (mut p, mut m, mut v) = (0.25f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            store.by_name_mut("w").unwrap().grad = Some(vec![*g]);
            adam_step(&mut store, &mut state, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            p -= lr * mh / (vh.sqrt() + 1e-8);
        }
        let got = store.by_name("w").unwrap().data()[0];
        prop_assert!((got - p).abs() <= 1e-14 * p.abs().max(1.0));
        prop_assert_eq!(state.t as usize, grads.len());
    }
}

#[test]
fn zero_epochs_leaves_model_untouched() {
    let mut t = Trainer::new(TrainConfig {
        epochs: 0,
        ..tiny()
    })
    .unwrap();
    let before = bytes(&Checkpoint::from_model(&t.model));
    assert!(t.run(|_| {}).unwrap().is_empty());
    assert_eq!(bytes(&Checkpoint::from_model(&t.model)), before);
}

#[test]
fn same_seed_gives_bitwise_identical_runs() {
    let run = || {
        let mut t = Trainer::new(tiny()).unwrap();
        t.run(|_| {}).unwrap();
        (history_csv(&t.history), bytes(&t.state_checkpoint()))
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert_eq!(c1, c2);
    assert_eq!(h1.lines().count(), 3);
}

#[test]
fn threaded_reduction_matches_serial() {
    let run = |threads| {
        let mut t = Trainer::new(tiny()).unwrap();
        t.set_threads(threads);
        t.run(|_| {}).unwrap();
        bytes(&t.state_checkpoint())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn micro_batch_split_matches_whole_batch_gradient() {
    // noiseless so both runs see the same inputs; no batch norm in the
    // default attention, so the split only changes summation order
    let base = TrainConfig {
        train_snr_db: None,
        val_snr_db: None,
        epochs: 1,
        ..tiny()
    };
    let mut whole = Trainer::new(TrainConfig {
        micro_batch: 16,
        ..base.clone()
    })
    .unwrap();
    let mut split = Trainer::new(TrainConfig {
        micro_batch: 4,
        ..base
    })
    .unwrap();
    whole.run(|_| {}).unwrap();
    split.run(|_| {}).unwrap();
    let a = &whole.history[0];
    let b = &split.history[0];
    assert!((a.train_loss - b.train_loss).abs() < 1e-12 * a.train_loss);
    let diff = whole
        .model
        .store
        .iter()
        .zip(split.model.store.iter())
        .map(|(p, q)| common::max_abs_diff(p.tensor.data(), q.tensor.data()))
        .fold(0.0, f64::max);
    assert!(diff < 1e-9, "parameter drift {diff}");
}

#[test]
fn resume_continues_bitwise() {
    let config = TrainConfig {
        epochs: 4,
        ..tiny()
    };
    let mut straight = Trainer::new(config.clone()).unwrap();
    straight.run(|_| {}).unwrap();

    let mut first = Trainer::new(TrainConfig {
        epochs: 2,
        ..config.clone()
    })
    .unwrap();
    first.run(|_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.psfc");
    first.state_checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::resume(config, &Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.run(|_| {}).unwrap();

    assert_eq!(
        history_csv(&resumed.history),
        history_csv(&straight.history)
    );
    assert_eq!(
        bytes(&resumed.state_checkpoint()),
        bytes(&straight.state_checkpoint())
    );
    assert_eq!(
        bytes(&resumed.best_checkpoint()),
        bytes(&straight.best_checkpoint())
    );
}

#[test]
fn resume_rejects_mismatched_config() {
    let mut t = Trainer::new(TrainConfig {
        epochs: 1,
        ..tiny()
    })
    .unwrap();
    t.run(|_| {}).unwrap();
    let ck = t.state_checkpoint();
    let other = TrainConfig { seed: 6, ..tiny() };
    assert!(matches!(
        Trainer::resume(other, &ck),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn non_finite_loss_aborts() {
    let mut t = Trainer::new(tiny()).unwrap();
    t.model
        .store
        .by_name_mut("decoder.conv.bias")
        .unwrap()
        .data_mut()[0] = f64::NAN;
    match t.run_epoch() {
        Err(Error::Divergence { epoch: 1, loss }) => assert!(loss.is_nan()),
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn training_reduces_validation_loss() {
    let config = TrainConfig {
        epochs: 6,
        train_count: 256,
        val_count: 64,
        batch_size: 32,
        learning_rate: 3e-3,
        ..tiny()
    };
    let mut t = Trainer::new(config).unwrap();
    let initial = t.validate().unwrap().loss;
    t.run(|_| {}).unwrap();
    let best = t.best_val_loss.unwrap();
    assert!(best < 0.7 * initial, "initial {initial}, best {best}");
}

#[test]
fn gdn_constraints_hold_after_every_step() {
    let mut t = Trainer::new(TrainConfig {
        learning_rate: 0.05,
        ..tiny()
    })
    .unwrap();
    for _ in 0..2 {
        t.run_epoch().unwrap();
        for p in t.model.store.iter() {
            let min = p
                .tensor
                .data()
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            if p.name.ends_with(".beta") {
                assert!(min >= 1e-6, "{} min {min}", p.name);
            }
            if p.name.ends_with(".gamma") {
                assert!(min >= 0.0, "{} min {min}", p.name);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let config = TrainConfig {
        model: ModelConfig {
            attention: AttentionKind::Cbam,
            attention_options: AttentionOptions {
                reduction: 2,
                tse_tile: None,
            },
            ..tiny().model
        },
        ..tiny()
    };
    let mut t = Trainer::new(TrainConfig {
        epochs: 1,
        ..config
    })
    .unwrap();
    t.run(|_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.psfc");
    t.best_checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let model = loaded.to_model().unwrap();
    let best = t.best_model();
    assert_eq!(model.config, best.config);
    for (p, q) in model.store.iter().zip(best.store.iter()) {
        assert_eq!(p.name, q.name);
        let pb: Vec<u64> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
        let qb: Vec<u64> = q.tensor.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(pb, qb, "{}", p.name);
    }

    let mut ck = loaded.clone();
    ck.params
        .push(("decoder.extra".into(), Tensor::scalar(1.0)));
    assert!(matches!(ck.to_model(), Err(Error::UnknownParameter(n)) if n == "decoder.extra"));

    let mut ck = loaded.clone();
    ck.params.pop();
    assert!(matches!(ck.to_model(), Err(Error::Format(_))));

    let mut raw = std::fs::read(&path).unwrap();
    raw[1] = b'Q';
    assert!(matches!(
        Checkpoint::read_from(&mut raw.as_slice()),
        Err(Error::Format(_))
    ));
    let raw = std::fs::read(&path).unwrap();
    assert!(matches!(
        Checkpoint::read_from(&mut &raw[..raw.len() / 2]),
        Err(Error::Format(_))
    ));
}
