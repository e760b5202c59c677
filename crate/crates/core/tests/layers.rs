mod common;

use common::Map;
use proptest::prelude::*;
use psfc::layers::{conv1d, conv1d_transpose};
use psfc::layers::{gdn, gdn_invert_exact_counted, igdn};
use psfc::layers::{maxpool1d, upsample1d};
use psfc::{Padding, Tape, Tensor};
use rand::Rng;

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gdn_value(x: &Tensor, beta: &Tensor, gamma: &Tensor) -> Tensor {
    let tape = Tape::new();
    gdn(tape.constant(x), tape.constant(beta), tape.constant(gamma))
        .unwrap()
        .value()
}

/// Direct per-position evaluation of the divisive normalization.
fn gdn_oracle(x: &[f64], c: usize, beta: &[f64], gamma: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
        for i in 0..c {
            let mut d = beta[i];
            for j in 0..c {
                d += gamma[i * c + j] * row[j] * row[j];
            }
            o[i] = row[i] / d.sqrt();
        }
    }
    out
}

#[test]
fn gdn_matches_direct_evaluation() {
    let mut rng = common::rng(4);
    let x = common::uniform(&mut rng, &[2, 5, 3], -2.0, 2.0);
    let beta = common::uniform(&mut rng, &[3], 0.5, 1.5);
    let gamma = common::uniform(&mut rng, &[3, 3], 0.0, 0.5);
    let got = gdn_value(&x, &beta, &gamma);
    let want = gdn_oracle(x.data(), 3, beta.data(), gamma.data());
    assert!(common::max_abs_diff(got.data(), &want) < 1e-14);

    let tape = Tape::new();
    let inv = igdn(
        tape.constant(&x),
        tape.constant(&beta),
        tape.constant(&gamma),
    )
    .unwrap();
    let fwd = gdn_oracle(x.data(), 3, beta.data(), gamma.data());
    for ((g, f), x) in inv.data().iter().zip(&fwd).zip(x.data()) {
        // igdn multiplies by the denominator gdn divides by
        assert!((g * f - x * x).abs() < 1e-12);
    }
}

#[test]
fn gdn_exact_inverse_round_trips() {
    let mut rng = common::rng(9);
    let mut worst = 0.0f64;
    let mut max_iters = 0;
    for _ in 0..100 {
        let y = common::uniform(&mut rng, &[8, 4], -1.0, 1.0);
        let beta = common::uniform(&mut rng, &[4], 0.5, 2.0);
        let gamma = common::uniform(&mut rng, &[4, 4], 0.0, 0.1);
        let (z, iters) = gdn_invert_exact_counted(&y, &beta, &gamma, 50, 1e-12).unwrap();
        worst = worst.max(gdn_value(&z, &beta, &gamma).max_abs_diff(&y));
        max_iters = max_iters.max(iters);
    }
    assert!(worst < 1e-8, "{worst}");
    assert!(max_iters <= 50);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv1d_matches_loop_oracle(
        len in 1usize..12,
        k in 1usize..6,
        stride in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let x = common::uniform(&mut rng, &[2, len, cin], -1.0, 1.0);
        let w = common::uniform(&mut rng, &[k, cin, cout], -1.0, 1.0);
        let b = common::uniform(&mut rng, &[cout], -1.0, 1.0);
        let tape = Tape::new();
        let y = conv1d(tape.leaf(&x), tape.leaf(&w), Some(tape.leaf(&b)), stride, Padding::Same).unwrap();
        let want = common::conv1d(&Map::from(&x), w.data(), b.data(), k, stride);
        prop_assert_eq!(y.shape(), vec![2, want.l, cout]);
        prop_assert!(common::max_abs_diff(&y.data(), &want.v) < 1e-12);
    }

    #[test]
    fn conv1d_transpose_matches_loop_oracle_and_is_adjoint(
        len in 1usize..8,
        k in 1usize..5,
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let n = len * stride;
        let x = common::uniform(&mut rng, &[1, n, 2], -1.0, 1.0);
        let y = common::uniform(&mut rng, &[1, len, 3], -1.0, 1.0);
        let w = common::uniform(&mut rng, &[k, 2, 3], -1.0, 1.0);
        let tape = Tape::new();
        let wv = tape.leaf(&w);
        let fwd = conv1d(tape.leaf(&x), wv, None, stride, Padding::Same).unwrap();
        let adj = conv1d_transpose(tape.leaf(&y), wv, None, stride).unwrap();
        prop_assert_eq!(adj.shape(), vec![1, n, 2]);
        let want = common::conv1d_transpose(&Map::from(&y), w.data(), &[0.0, 0.0], k, stride);
        prop_assert!(common::max_abs_diff(&adj.data(), &want.v) < 1e-12);
        prop_assert!((inner(&fwd.data(), y.data()) - inner(x.data(), &adj.data())).abs() < 1e-10);
    }

    #[test]
    fn gdn_with_zero_gamma_scales_by_beta_power(seed in any::<u64>(), c in 1usize..5) {
        let mut rng = common::rng(seed);
        let x = common::uniform(&mut rng, &[3, c], -5.0, 5.0);
        let beta = common::uniform(&mut rng, &[c], 1e-6, 4.0);
        let y = gdn_value(&x, &beta, &Tensor::zeros(vec![c, c]));
        for (i, (a, b)) in y.data().iter().zip(x.data()).enumerate() {
            prop_assert_eq!(*a, b / beta.data()[i % c].sqrt());
        }
    }

    #[test]
    fn upsample_then_pool_is_identity(len in 1usize..20, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let x = common::uniform(&mut rng, &[2, len, c], -3.0, 3.0);
        let tape = Tape::new();
        let up = upsample1d(tape.leaf(&x)).unwrap();
        prop_assert_eq!(up.shape(), vec![2, 2 * len, c]);
        prop_assert_eq!(maxpool1d(up).unwrap().value(), x);
    }

    #[test]
    fn maxpool_takes_pairwise_maxima(half in 1usize..10, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let v: Vec<f64> = (0..2 * half).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let y = maxpool1d(tape.leaf(&Tensor::new(vec![1, 2 * half, 1], v.clone()).unwrap())).unwrap();
        let want: Vec<f64> = v.chunks(2).map(|p| p[0].max(p[1])).collect();
        prop_assert_eq!(y.data(), want);
    }
}

#[test]
fn odd_pool_length_is_rejected() {
    let tape = Tape::new();
    assert!(maxpool1d(tape.leaf(&Tensor::zeros(vec![1, 5, 1]))).is_err());
}
