mod common;

use proptest::prelude::*;
use psfc::gradcheck::{grad_check, grad_check_many};
use psfc::layers::gdn;
use psfc::tensor::inverse_permutation;
use psfc::{Error, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

/// N(0,1) draws pushed at least `gap` away from zero, for kinked ops.
fn randn_away(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    randn(rng, shape).map(|v| {
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

#[test]
fn elementwise_ops_pass_grad_check() {
    let mut rng = common::rng(1);
    let a = randn_away(&mut rng, &[8, 4], 0.05);
    let b = randn(&mut rng, &[8, 4]);
    let row = randn(&mut rng, &[4]);
    type Case = for<'t> fn(&[psfc::Var<'t>]) -> psfc::Result<psfc::Var<'t>>;
    let cases: [(&str, Case); 9] = [
        ("add", |v| Ok(v[0].add(v[1])?.sum())),
        ("sub", |v| Ok(v[0].sub(v[1])?.sum())),
        ("mul", |v| Ok(v[0].mul(v[1])?.sum())),
        ("abs", |v| Ok(v[0].abs().mul(v[1])?.sum())),
        ("sigmoid", |v| Ok(v[0].sigmoid().mul(v[1])?.sum())),
        ("relu", |v| Ok(v[0].relu().mul(v[1])?.sum())),
        ("pow2", |v| Ok(v[0].abs().pow_const(2.0)?.mul(v[1])?.sum())),
        ("pow_half", |v| {
            Ok(v[0].abs().pow_const(0.5)?.mul(v[1])?.sum())
        }),
        ("pow_1.7", |v| {
            Ok(v[0].abs().pow_const(1.7)?.mul(v[1])?.sum())
        }),
    ];
    for (name, f) in cases {
        let err = grad_check_many(|_, v| f(v), &[a.clone(), b.clone()], 1e-6, None).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
    let err = grad_check_many(
        |_, v| Ok(v[0].mul(v[1])?.add(v[1])?.sum()),
        &[a.clone(), row],
        1e-6,
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "broadcast: {err}");
}

#[test]
fn pow_of_negative_base_with_fractional_exponent_is_a_domain_error() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![-2.0]));
    assert!(matches!(x.pow_const(0.5), Err(Error::Domain(_))));
    assert_eq!(x.pow_const(2.0).unwrap().item(), 4.0);
}

#[test]
fn gdn_sum_gradient_matches_central_differences() {
    let mut rng = common::rng(2);
    let x = randn(&mut rng, &[4, 2]);
    let beta = Tensor::from_vec(vec![1.0, 0.7]);
    let gamma = Tensor::new(vec![2, 2], vec![0.5, 0.1, 0.2, 0.3]).unwrap();
    let err = grad_check(
        |tape, v| Ok(gdn(v, tape.constant(&beta), tape.constant(&gamma))?.sum()),
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn maxpool_gradient_follows_first_index_on_ties() {
    let tape = Tape::new();
    let x = tape.param(&Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 2.0, 2.0]).unwrap());
    let y = x.maxpool2().unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permute_round_trips_bitwise(
        dims in prop::collection::vec(1usize..4, 1..5),
        seed in any::<u64>(),
        shuffle in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let x = randn(&mut rng, &dims);
        let mut perm: Vec<usize> = (0..dims.len()).collect();
        let mut r = common::rng(shuffle);
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let back = x.permute(&perm).unwrap().permute(&inverse_permutation(&perm)).unwrap();
        prop_assert_eq!(&back, &x);

        let tape = Tape::new();
        let v = tape.leaf(&x);
        let w = v.permute(&perm).unwrap().permute(&inverse_permutation(&perm)).unwrap();
        prop_assert_eq!(w.value(), x);
    }

    #[test]
    fn fan_out_accumulates_each_use(k in 1usize..8, v in -10.0f64..10.0) {
        let tape = Tape::new();
        let x = tape.param(&Tensor::scalar(v));
        let mut y = x;
        for _ in 1..k {
            y = y.add(x).unwrap();
        }
        let g = tape.backward(y.sum()).unwrap();
        prop_assert_eq!(g.wrt(x).unwrap().item(), k as f64);
    }

    #[test]
    fn broadcast_gradient_counts_repeats(rows in 1usize..6, cols in 1usize..6) {
        let tape = Tape::new();
        let a = tape.param(&Tensor::zeros(vec![rows, cols]));
        let b = tape.param(&Tensor::zeros(vec![cols]));
        let g = tape.backward(a.add(b).unwrap().sum()).unwrap();
        prop_assert!(g.wrt(b).unwrap().data().iter().all(|&v| v == rows as f64));
        prop_assert!(g.wrt(a).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reshape_preserves_data(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let x = Tensor::new(vec![a, b, c], (0..a * b * c).map(|v| v as f64).collect()).unwrap();
        let y = x.reshape(vec![a * b, c]).unwrap();
        prop_assert_eq!(y.data(), x.data());
        prop_assert!(x.reshape(vec![a * b * c + 1]).is_err());
    }
}
