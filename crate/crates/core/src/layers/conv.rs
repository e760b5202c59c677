use rand::Rng;

use crate::autodiff::{Padding, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

fn rank3(x: Var<'_>, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    match s.as_slice() {
        [b, l, c] => Ok((*b, *l, *c)),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("expected (batch, length, channels), got {s:?}"),
        }),
    }
}

/// 1D cross-correlation. `x`: `(b, l, cin)`, `kernel`: `(k, cin, cout)`.
/// Same padding yields `ceil(l / stride)` outputs.
pub fn conv1d<'t>(
    x: Var<'t>,
    kernel: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    padding: Padding,
) -> Result<Var<'t>> {
    let (b, l, c) = rank3(x, "conv1d")?;
    let ks = kernel.shape();
    if ks.len() != 3 || ks[1] != c {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            lhs: x.shape(),
            rhs: ks,
        });
    }
    let x4 = x.reshape(&[b, l, 1, c])?;
    let k4 = kernel.reshape(&[ks[0], 1, ks[1], ks[2]])?;
    let y = x4.conv2d(k4, bias, (stride, 1), padding)?;
    let ys = y.shape();
    y.reshape(&[ys[0], ys[1], ys[3]])
}

/// Transpose of [`conv1d`] with same padding: `(b, l, cin)` →
/// `(b, l·stride, cout)`. `kernel` is `(k, cout, cin)`, i.e. the kernel of
/// the forward convolution `cout → cin` it transposes.
pub fn conv1d_transpose<'t>(
    x: Var<'t>,
    kernel: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
) -> Result<Var<'t>> {
    let (b, l, c) = rank3(x, "conv1d_transpose")?;
    let ks = kernel.shape();
    if ks.len() != 3 || ks[2] != c {
        return Err(Error::ShapeMismatch {
            op: "conv1d_transpose",
            lhs: x.shape(),
            rhs: ks,
        });
    }
    let x4 = x.reshape(&[b, l, 1, c])?;
    let k4 = kernel.reshape(&[ks[0], 1, ks[1], ks[2]])?;
    let y = x4.conv_transpose2d(k4, bias, (stride, 1))?;
    let ys = y.shape();
    y.reshape(&[ys[0], ys[1], ys[3]])
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1d {
    /// Glorot-uniform kernel, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            glorot_uniform(
                rng,
                vec![kernel_size, in_channels, out_channels],
                kernel_size * in_channels,
                kernel_size * out_channels,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        Conv1d {
            kernel,
            bias,
            kernel_size,
            in_channels,
            out_channels,
            stride,
            padding,
        }
    }

    /// Stride-1 same-padded convolution.
    pub fn same(
        store: &mut ParamStore,
        name: &str,
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(
            store,
            name,
            kernel_size,
            in_channels,
            out_channels,
            1,
            Padding::Same,
            rng,
        )
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        conv1d(
            x,
            cx.var(self.kernel),
            Some(cx.var(self.bias)),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            glorot_uniform(
                rng,
                vec![kernel_size, out_channels, in_channels],
                kernel_size * in_channels,
                kernel_size * out_channels,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        ConvTranspose1d {
            kernel,
            bias,
            stride,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        conv1d_transpose(x, cx.var(self.kernel), Some(cx.var(self.bias)), self.stride)
    }
}

/// 2D convolution on `(b, h, w, cin)` with same padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        stride: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let area = kernel.0 * kernel.1;
        let k = store.add(
            format!("{name}.kernel"),
            glorot_uniform(
                rng,
                vec![kernel.0, kernel.1, in_channels, out_channels],
                area * in_channels,
                area * out_channels,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        Conv2d {
            kernel: k,
            bias,
            stride,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(
            cx.var(self.kernel),
            Some(cx.var(self.bias)),
            self.stride,
            Padding::Same,
        )
    }
}

/// 2D transposed convolution on `(b, h, w, cin)` → `(b, h·sh, w·sw, cout)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        stride: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let area = kernel.0 * kernel.1;
        let k = store.add(
            format!("{name}.kernel"),
            glorot_uniform(
                rng,
                vec![kernel.0, kernel.1, out_channels, in_channels],
                area * in_channels,
                area * out_channels,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        ConvTranspose2d {
            kernel: k,
            bias,
            stride,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv_transpose2d(cx.var(self.kernel), Some(cx.var(self.bias)), self.stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let n = shape.iter().product();
        t(
            shape,
            &(0..n)
                .map(|_| StandardNormal.sample(rng))
                .collect::<Vec<f64>>(),
        )
    }

    #[test]
    fn identity_kernel() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let k = tape.leaf(&t(&[1, 1, 1], &[1.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = conv1d(x, k, Some(b), 1, Padding::Same).unwrap();
        assert_eq!(y.data(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn box_kernel_same_padding() {
        // hand convolution with one zero on each side
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(&t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
        let y = conv1d(x, k, None, 1, Padding::Same).unwrap();
        assert_eq!(y.data(), vec![3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 4, 2]));
        let k = tape.leaf(&Tensor::zeros(vec![3, 1, 4]));
        assert!(matches!(
            conv1d(x, k, None, 1, Padding::Same),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(conv1d_transpose(x, k, None, 2).is_err());
    }

    #[test]
    fn valid_padding_needs_long_enough_input() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 2, 1]));
        let k = tape.leaf(&Tensor::zeros(vec![3, 1, 1]));
        assert!(conv1d(x, k, None, 1, Padding::Valid).is_err());
        let x = tape.leaf(&Tensor::zeros(vec![1, 5, 1]));
        assert_eq!(
            conv1d(x, k, None, 1, Padding::Valid).unwrap().shape(),
            vec![1, 3, 1]
        );
    }

    #[test]
    fn transpose_hand_expansion() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 1], &[1.0]));
        let k = tape.leaf(&t(&[2, 1, 1], &[1.0, 0.0]));
        let y = conv1d_transpose(x, k, None, 2).unwrap();
        assert_eq!(y.data(), vec![1.0, 0.0]);
    }

    #[test]
    fn stride_shapes() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 8, 3]));
        let k = tape.leaf(&Tensor::zeros(vec![3, 2, 3]));
        assert_eq!(
            conv1d_transpose(x, k, None, 2).unwrap().shape(),
            vec![1, 16, 2]
        );
        let k = tape.leaf(&Tensor::zeros(vec![3, 3, 2]));
        assert_eq!(
            conv1d(x, k, None, 2, Padding::Same).unwrap().shape(),
            vec![1, 4, 2]
        );
        let odd = tape.leaf(&Tensor::zeros(vec![1, 7, 3]));
        assert_eq!(
            conv1d(odd, k, None, 2, Padding::Same).unwrap().shape(),
            vec![1, 4, 2]
        );
    }

    fn inner(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, k) in [(1, 3), (2, 3), (2, 2), (2, 4), (1, 1)] {
            let tape = Tape::new();
            let len = 6;
            let x = randn(&mut rng, &[1, len, 2]);
            let kern = randn(&mut rng, &[k, 2, 3]);
            let y = randn(&mut rng, &[1, len / stride, 3]);
            let kv = tape.leaf(&kern);
            let fwd = conv1d(tape.leaf(&x), kv, None, stride, Padding::Same).unwrap();
            let adj = conv1d_transpose(tape.leaf(&y), kv, None, stride).unwrap();
            let lhs = inner(&fwd.data(), y.data());
            let rhs = inner(x.data(), &adj.data());
            assert!(
                (lhs - rhs).abs() < 1e-10,
                "stride {stride} k {k}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_shape_contract_all_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ch in [1usize, 64] {
            let mut store = ParamStore::new();
            let same = Conv1d::same(&mut store, "c", 3, ch, ch, &mut rng);
            let down = Conv1d::new(&mut store, "d", 3, ch, ch, 2, Padding::Same, &mut rng);
            let up = ConvTranspose1d::new(&mut store, "u", 3, ch, ch, 2, &mut rng);
            for len in (2..=256).step_by(2) {
                let tape = Tape::new();
                let cx = store.bind(&tape, false);
                let x = tape.leaf(&Tensor::zeros(vec![1, len, ch]));
                assert_eq!(same.forward(&cx, x).unwrap().shape(), vec![1, len, ch]);
                assert_eq!(down.forward(&cx, x).unwrap().shape(), vec![1, len / 2, ch]);
                assert_eq!(up.forward(&cx, x).unwrap().shape(), vec![1, len * 2, ch]);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 8, 4]);
        let k = randn(&mut rng, &[3, 4, 3]);
        let b = randn(&mut rng, &[3]);
        for stride in [1, 2] {
            let err = grad_check_many(
                |_, v| Ok(conv1d(v[0], v[1], Some(v[2]), stride, Padding::Same)?.sum()),
                &[x.clone(), k.clone(), b.clone()],
                1e-6,
                None,
            )
            .unwrap();
            assert!(err < 1e-4, "stride {stride}: {err}");
        }
        let kt = randn(&mut rng, &[3, 3, 4]);
        let err = grad_check_many(
            |_, v| Ok(conv1d_transpose(v[0], v[1], Some(v[2]), 2)?.sum()),
            &[x, kt, b],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[1, 8, 4, 1]);
        let k = randn(&mut rng, &[3, 3, 1, 1]);
        let b = randn(&mut rng, &[1]);
        // weight the output so the check is not a plain sum
        let w = randn(&mut rng, &[1, 4, 4, 1]);
        let err = grad_check_many(
            |tape, v| {
                let y = v[0].conv2d(v[1], Some(v[2]), (2, 1), Padding::Same)?;
                Ok(y.mul(tape.constant(&w))?.sum())
            },
            &[x.clone(), k.clone(), b.clone()],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let small = randn(&mut rng, &[1, 4, 4, 1]);
        let w = randn(&mut rng, &[1, 8, 4, 1]);
        let err = grad_check_many(
            |tape, v| {
                let y = v[0].conv_transpose2d(v[1], Some(v[2]), (2, 1))?;
                Ok(y.mul(tape.constant(&w))?.sum())
            },
            &[small, k, b],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
