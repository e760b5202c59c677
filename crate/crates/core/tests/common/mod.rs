//! Plain-loop reference implementations shared by integration tests.
//! Nothing here touches the tape; tensors are row-major `(batch, len, ch)`.
#![allow(dead_code)]

use psfc::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .data()
        .to_vec()
}

/// Overwrites every trainable parameter with U(-a, a) so biases are nonzero.
pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng, a: f64) {
    for p in store.iter_mut().filter(|p| p.trainable) {
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-a..a));
    }
}

pub fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `(out_len, pad_before)` of a same-padded axis.
pub fn same_geometry(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (out, total / 2)
}

/// Rank-3 view helper.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub b: usize,
    pub l: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(b: usize, l: usize, c: usize) -> Self {
        Map {
            b,
            l,
            c,
            v: vec![0.0; b * l * c],
        }
    }
    pub fn from(t: &Tensor) -> Self {
        let s = t.shape();
        Map {
            b: s[0],
            l: s[1],
            c: s[2],
            v: t.data().to_vec(),
        }
    }
    pub fn at(&self, b: usize, i: usize, c: usize) -> f64 {
        self.v[(b * self.l + i) * self.c + c]
    }
    pub fn set(&mut self, b: usize, i: usize, c: usize, val: f64) {
        self.v[(b * self.l + i) * self.c + c] = val;
    }
    pub fn transpose(&self) -> Map {
        let mut out = Map::zeros(self.b, self.c, self.l);
        for b in 0..self.b {
            for i in 0..self.l {
                for c in 0..self.c {
                    out.set(b, c, i, self.at(b, i, c));
                }
            }
        }
        out
    }
    pub fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        assert_eq!((self.b, self.l, self.c), (o.b, o.l, o.c));
        Map {
            v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect(),
            ..*self
        }
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            v: self.v.iter().map(|a| f(*a)).collect(),
            ..*self
        }
    }
    /// Multiplies by `m`, broadcasting any size-1 axis of `m`.
    pub fn gate(&self, m: &Map) -> Map {
        let mut out = self.clone();
        for b in 0..self.b {
            for i in 0..self.l {
                for c in 0..self.c {
                    let g = m.at(
                        b,
                        if m.l == 1 { 0 } else { i },
                        if m.c == 1 { 0 } else { c },
                    );
                    out.set(b, i, c, self.at(b, i, c) * g);
                }
            }
        }
        out
    }
    pub fn mean_len(&self) -> Map {
        let mut out = Map::zeros(self.b, 1, self.c);
        for b in 0..self.b {
            for c in 0..self.c {
                let s: f64 = (0..self.l).map(|i| self.at(b, i, c)).sum();
                out.set(b, 0, c, s / self.l as f64);
            }
        }
        out
    }
    pub fn max_len(&self) -> Map {
        let mut out = Map::zeros(self.b, 1, self.c);
        for b in 0..self.b {
            for c in 0..self.c {
                let m = (0..self.l)
                    .map(|i| self.at(b, i, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                out.set(b, 0, c, m);
            }
        }
        out
    }
    /// `(b, l, c)` → `(b, l, 2)` holding the channel mean and max.
    pub fn mean_max_channels(&self) -> Map {
        let mut out = Map::zeros(self.b, self.l, 2);
        for b in 0..self.b {
            for i in 0..self.l {
                let row: Vec<f64> = (0..self.c).map(|c| self.at(b, i, c)).collect();
                out.set(b, i, 0, row.iter().sum::<f64>() / self.c as f64);
                out.set(
                    b,
                    i,
                    1,
                    row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                );
            }
        }
        out
    }
}

/// Dense layer on the channel axis: `w` is `(cin, cout)`.
pub fn dense(x: &Map, w: &[f64], bias: &[f64]) -> Map {
    let cout = bias.len();
    let mut out = Map::zeros(x.b, x.l, cout);
    for b in 0..x.b {
        for i in 0..x.l {
            for o in 0..cout {
                let mut s = bias[o];
                for ci in 0..x.c {
                    s += x.at(b, i, ci) * w[ci * cout + o];
                }
                out.set(b, i, o, s);
            }
        }
    }
    out
}

/// Same-padded 1D convolution, kernel `(k, cin, cout)`.
pub fn conv1d(x: &Map, kernel: &[f64], bias: &[f64], k: usize, stride: usize) -> Map {
    let cout = bias.len();
    let (out_len, pad) = same_geometry(x.l, k, stride);
    let mut out = Map::zeros(x.b, out_len, cout);
    for b in 0..x.b {
        for o in 0..out_len {
            for co in 0..cout {
                let mut s = bias[co];
                for t in 0..k {
                    let p = (o * stride + t) as isize - pad as isize;
                    if p < 0 || p >= x.l as isize {
                        continue;
                    }
                    for ci in 0..x.c {
                        s += x.at(b, p as usize, ci) * kernel[(t * x.c + ci) * cout + co];
                    }
                }
                out.set(b, o, co, s);
            }
        }
    }
    out
}

/// Transposed 1D convolution producing `stride · len`, kernel `(k, cout, cin)`.
pub fn conv1d_transpose(x: &Map, kernel: &[f64], bias: &[f64], k: usize, stride: usize) -> Map {
    let cout = bias.len();
    let n = x.l * stride;
    let (_, pad) = same_geometry(n, k, stride);
    let mut out = Map::zeros(x.b, n, cout);
    for b in 0..x.b {
        for p in 0..n {
            for co in 0..cout {
                out.set(b, p, co, bias[co]);
            }
        }
        for o in 0..x.l {
            for t in 0..k {
                let p = (o * stride + t) as isize - pad as isize;
                if p < 0 || p >= n as isize {
                    continue;
                }
                for co in 0..cout {
                    let mut s = 0.0;
                    for ci in 0..x.c {
                        s += x.at(b, o, ci) * kernel[(t * cout + co) * x.c + ci];
                    }
                    let cur = out.at(b, p as usize, co);
                    out.set(b, p as usize, co, cur + s);
                }
            }
        }
    }
    out
}

/// Single-channel same-padded 2D convolution of the `(l, c)` plane.
pub fn conv2d_plane(
    x: &Map,
    kernel: &[f64],
    bias: f64,
    k: (usize, usize),
    s: (usize, usize),
) -> Map {
    let (oh, ph) = same_geometry(x.l, k.0, s.0);
    let (ow, pw) = same_geometry(x.c, k.1, s.1);
    let mut out = Map::zeros(x.b, oh, ow);
    for b in 0..x.b {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias;
                for u in 0..k.0 {
                    for v in 0..k.1 {
                        let p = (i * s.0 + u) as isize - ph as isize;
                        let q = (j * s.1 + v) as isize - pw as isize;
                        if p < 0 || q < 0 || p >= x.l as isize || q >= x.c as isize {
                            continue;
                        }
                        acc += x.at(b, p as usize, q as usize) * kernel[u * k.1 + v];
                    }
                }
                out.set(b, i, j, acc);
            }
        }
    }
    out
}

/// Adjoint of [`conv2d_plane`] from the `(l·s0, c·s1)` plane, plus bias.
pub fn conv2d_plane_transpose(
    x: &Map,
    kernel: &[f64],
    bias: f64,
    k: (usize, usize),
    s: (usize, usize),
) -> Map {
    let (nh, nw) = (x.l * s.0, x.c * s.1);
    let (_, ph) = same_geometry(nh, k.0, s.0);
    let (_, pw) = same_geometry(nw, k.1, s.1);
    let mut out = Map::zeros(x.b, nh, nw);
    out.v.iter_mut().for_each(|v| *v = bias);
    for b in 0..x.b {
        for i in 0..x.l {
            for j in 0..x.c {
                for u in 0..k.0 {
                    for v in 0..k.1 {
                        let p = (i * s.0 + u) as isize - ph as isize;
                        let q = (j * s.1 + v) as isize - pw as isize;
                        if p < 0 || q < 0 || p >= nh as isize || q >= nw as isize {
                            continue;
                        }
                        let cur = out.at(b, p as usize, q as usize);
                        out.set(
                            b,
                            p as usize,
                            q as usize,
                            cur + x.at(b, i, j) * kernel[u * k.1 + v],
                        );
                    }
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Attention blocks recomputed from their stored parameters.
pub mod attn {
    use super::*;

    const BN_EPS: f64 = 1e-3;

    fn mlp(store: &ParamStore, n: &str, x: &Map) -> Map {
        let h = dense(
            x,
            &param(store, &format!("{n}.fc1.weight")),
            &param(store, &format!("{n}.fc1.bias")),
        )
        .map(|v| v.max(0.0));
        dense(
            &h,
            &param(store, &format!("{n}.fc2.weight")),
            &param(store, &format!("{n}.fc2.bias")),
        )
    }

    fn conv(store: &ParamStore, n: &str, x: &Map, k: usize, stride: usize) -> Map {
        conv1d(
            x,
            &param(store, &format!("{n}.kernel")),
            &param(store, &format!("{n}.bias")),
            k,
            stride,
        )
    }

    pub fn se(store: &ParamStore, n: &str, x: &Map) -> Map {
        x.gate(&mlp(store, n, &x.mean_len()).map(sig))
    }

    /// Evaluation-mode CBAM (running batch-norm statistics).
    pub fn cbam(store: &ParamStore, n: &str, x: &Map) -> Map {
        let a = mlp(store, n, &x.mean_len());
        let m = mlp(store, n, &x.max_len());
        let refined = x.gate(&a.zip(&m, |p, q| sig(p + q)));
        let c = conv(
            store,
            &format!("{n}.spatial"),
            &refined.mean_max_channels(),
            7,
            1,
        );
        let bn = |s: &str| param(store, &format!("{n}.bn.{s}"))[0];
        let (mean, var, scale, shift) = (
            bn("running_mean"),
            bn("running_var"),
            bn("scale"),
            bn("shift"),
        );
        let map = c.map(|v| sig((v - mean) / (var + BN_EPS).sqrt() * scale + shift));
        refined.gate(&map)
    }

    pub fn tse(store: &ParamStore, n: &str, x: &Map, tile: usize) -> Map {
        let lo = x.l / tile;
        let mut pooled = Map::zeros(x.b, lo, x.c);
        for b in 0..x.b {
            for j in 0..lo {
                for c in 0..x.c {
                    let s: f64 = (0..tile).map(|r| x.at(b, j * tile + r, c)).sum();
                    pooled.set(b, j, c, s / tile as f64);
                }
            }
        }
        let h = conv(store, &format!("{n}.conv1"), &pooled, 1, 1).map(|v| v.max(0.0));
        let coarse = conv(store, &format!("{n}.conv2"), &h, 1, 1).map(sig);
        let mut map = Map::zeros(x.b, x.l, x.c);
        for b in 0..x.b {
            for i in 0..x.l {
                for c in 0..x.c {
                    map.set(b, i, c, coarse.at(b, i / tile, c));
                }
            }
        }
        x.gate(&map)
    }

    pub fn triplet(store: &ParamStore, n: &str, x: &Map) -> Map {
        let branch = |i: usize, y: &Map| {
            let m = conv(
                store,
                &format!("{n}.branch{i}"),
                &y.mean_max_channels(),
                7,
                1,
            )
            .map(sig);
            y.gate(&m)
        };
        let xt = x.transpose();
        let a1 = branch(1, &xt).transpose();
        let a2 = branch(2, &xt).transpose();
        let a3 = branch(3, x);
        a1.zip(&a2, |p, q| p + q)
            .zip(&a3, |p, q| p + q)
            .map(|v| v * (1.0 / 3.0))
    }

    /// Channel-branch output of global attention (already rotated back).
    pub fn global_channel(store: &ParamStore, n: &str, x: &Map) -> Map {
        let xt = x.transpose();
        xt.gate(&conv(store, &format!("{n}.channel"), &xt, 1, 1).map(sig))
            .transpose()
    }

    pub fn global(store: &ParamStore, n: &str, x: &Map) -> Map {
        let channel = global_channel(store, n, x);
        let w = param(store, &format!("{n}.joint.kernel"))[0];
        let b = param(store, &format!("{n}.joint.bias"))[0];
        let joint = x.gate(&x.map(|v| sig(w * v + b)));
        let spatial = x.gate(&conv(store, &format!("{n}.spatial"), x, 1, 1).map(sig));
        channel
            .zip(&joint, |p, q| p + q)
            .zip(&spatial, |p, q| p + q)
    }

    pub fn simplified_down(store: &ParamStore, n: &str, x: &Map) -> Map {
        let map = conv2d_plane(
            x,
            &param(store, &format!("{n}.map.kernel")),
            param(store, &format!("{n}.map.bias"))[0],
            (3, 3),
            (2, 1),
        )
        .map(sig);
        conv(store, &format!("{n}.value"), x, 3, 2).zip(&map, |v, m| v * m)
    }

    pub fn simplified_up(store: &ParamStore, n: &str, x: &Map) -> Map {
        let map = conv2d_plane_transpose(
            x,
            &param(store, &format!("{n}.map.kernel")),
            param(store, &format!("{n}.map.bias"))[0],
            (3, 3),
            (2, 1),
        )
        .map(sig);
        let value = conv1d_transpose(
            x,
            &param(store, &format!("{n}.value.kernel")),
            &param(store, &format!("{n}.value.bias")),
            3,
            2,
        );
        value.zip(&map, |v, m| v * m)
    }

    pub fn mssgam(store: &ParamStore, n: &str, x: &Map) -> Map {
        let d1 = simplified_down(store, &format!("{n}.down"), x);
        let d2 = conv(store, &format!("{n}.mid"), &d1, 3, 2);
        let u1 = simplified_up(store, &format!("{n}.up"), &d2);
        let skip = u1.zip(&d1, |p, q| p + q);
        let y = conv1d_transpose(
            &skip,
            &param(store, &format!("{n}.last.kernel")),
            &param(store, &format!("{n}.last.bias")),
            3,
            2,
        );
        y.zip(x, |p, q| p + q)
    }
}

/// Keeps the Glorot kernels but gives biases and GDN stages generic values,
/// so activations stay well inside the sigmoid's range.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut().filter(|p| p.trainable) {
        let (lo, hi, add) = if p.name.ends_with(".fc1.bias") || p.name.ends_with(".conv1.bias") {
            // ReLU bottlenecks start active
            (0.05, 0.15, false)
        } else if p.name.ends_with(".fc1.weight") || p.name.ends_with(".attention.conv1.kernel") {
            // small enough that the positive bias keeps the unit on
            (0.01, 0.05, true)
        } else if p.name.ends_with(".bias") {
            (-0.1, 0.1, false)
        } else if p.name.ends_with(".beta") {
            (0.5, 1.5, false)
        } else if p.name.ends_with(".gamma") {
            (0.0, 0.05, true)
        } else {
            (0.8, 1.2, true)
        };
        for v in p.tensor.data_mut() {
            let u = r.random_range(lo..hi);
            // kernels are scaled, gammas shifted, the rest replaced
            *v = match (add, p.name.ends_with(".gamma")) {
                (true, true) => *v + u,
                (true, false) => *v * u,
                _ => u,
            };
        }
    }
}

pub const NOISE_FLOOR: f64 = 1e-8;

/// Largest relative error between reverse-mode parameter gradients of the
/// scalar `f` and central differences, over up to `per_param` evenly strided
/// components of every trainable tensor.
pub fn param_grad_check<F>(store: &mut ParamStore, training: bool, per_param: usize, f: F) -> f64
where
    F: for<'t> Fn(&psfc::Ctx<'t>) -> psfc::Result<psfc::Var<'t>>,
{
    use psfc::gradcheck::relative_error;
    use psfc::Tape;
    let analytic: Vec<(String, Vec<f64>)> = {
        let tape = Tape::new();
        let cx = store.bind(&tape, training);
        let out = f(&cx).unwrap();
        let grads = tape.backward(out).unwrap();
        store
            .iter()
            .zip(cx.param_vars())
            .filter(|(p, _)| p.trainable)
            .map(|(p, v)| (p.name.clone(), grads.data(*v).unwrap().into_owned()))
            .collect()
    };
    let eval = |store: &ParamStore| {
        let tape = Tape::new();
        let cx = store.bind(&tape, training);
        f(&cx).unwrap().item()
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (name, g) in analytic {
        let stride = g.len().div_ceil(per_param).max(1);
        for i in (0..g.len()).step_by(stride) {
            let orig = store.by_name(&name).unwrap().data()[i];
            store.by_name_mut(&name).unwrap().data_mut()[i] = orig + h;
            let plus = eval(store);
            store.by_name_mut(&name).unwrap().data_mut()[i] = orig - h;
            let minus = eval(store);
            store.by_name_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            // both below central-difference resolution: an exactly-zero gradient
            if g[i].abs().max(numeric.abs()) < NOISE_FLOOR {
                continue;
            }
            worst = worst.max(relative_error(g[i], numeric));
        }
    }
    worst
}
