//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. [`Var`] is a
//! cheap handle to a recorded value. [`Tape::backward`] walks the tape once
//! in reverse and returns the gradients of a scalar loss with respect to
//! every recorded value that requires them.
//!
//! Tensors flowing through layers use the `(batch, length, channels)`
//! layout; 2D convolutions use `(batch, h, w, channels)`.

mod linalg;

use std::cell::{Ref, RefCell};

pub(crate) use linalg::gemm;
pub use linalg::ConvGeom;
use linalg::{add_bias, axis_geometry, col2im, column_sums, patches};

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, inverse_permutation, numel,
    permute_data, validate_shape, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Abs,
    Pow(f64),
    Sigmoid,
    Relu,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    SumAll(usize),
    Reduce {
        input: usize,
        axis: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Conv {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    AvgPool {
        input: usize,
        size: usize,
    },
    MatMul(usize, usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Records one forward pass. Single-threaded; build one tape per pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it requires a gradient iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Records a leaf that always requires a gradient.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that never requires a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        validate_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "constant",
                msg: format!("{} values for shape {shape:?}", data.len()),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn nodes(&self) -> Ref<'_, Vec<Node>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        let (shape, value) = {
            let nodes = self.nodes();
            let base = &nodes[first.id].shape;
            if axis >= base.len() {
                return Err(Error::InvalidShape {
                    op: "concat",
                    msg: format!("axis {axis} out of range for {base:?}"),
                });
            }
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.id].shape;
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.clone(),
                    });
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut value = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.id];
                    let chunk = n.shape[axis] * inner;
                    value.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, value)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(shape, value, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Reverse pass from a scalar `loss`. A tape can be consumed once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Graph("tape was already consumed by backward".into()));
        }
        let nodes = &inner.nodes;
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                propagate(nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.shape.clone()).collect();
        inner.consumed = true;
        Ok(Gradients {
            grads,
            requires,
            shapes,
        })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// dLoss/dVar. Values that require a gradient but did not influence the
    /// loss get zeros; values that do not require one get `None`.
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        let data = self.data(v)?;
        Some(Tensor::new(self.shapes[v.id].clone(), data.to_vec()).expect("recorded shape"))
    }

    pub fn data(&self, v: Var<'_>) -> Option<std::borrow::Cow<'_, [f64]>> {
        if !self.requires.get(v.id).copied().unwrap_or(false) {
            return None;
        }
        match &self.grads[v.id] {
            Some(g) => Some(std::borrow::Cow::Borrowed(g)),
            None => Some(std::borrow::Cow::Owned(vec![
                0.0;
                numel(&self.shapes[v.id])
            ])),
        }
    }
}

fn accumulate<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => binary_backward(nodes, node, *kind, *a, *b, g, grads),
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value;
            let y = &node.value;
            if let Some(ga) = accumulate(nodes, grads, *a) {
                match *kind {
                    UnaryKind::Neg => ga.iter_mut().zip(g).for_each(|(d, g)| *d -= g),
                    UnaryKind::Abs => {
                        for i in 0..g.len() {
                            let s = if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            ga[i] += g[i] * s;
                        }
                    }
                    UnaryKind::Pow(p) if p == 2.0 => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * 2.0 * x[i];
                        }
                    }
                    UnaryKind::Pow(p) if p == 0.5 => {
                        // d√x = 1 / (2√x), with √x already in y
                        for i in 0..g.len() {
                            if g[i] != 0.0 {
                                ga[i] += g[i] * 0.5 / y[i];
                            }
                        }
                    }
                    UnaryKind::Pow(p) => {
                        for i in 0..g.len() {
                            if g[i] != 0.0 {
                                ga[i] += g[i] * p * pow(x[i], p - 1.0);
                            }
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                    UnaryKind::Relu => {
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    }
                    UnaryKind::Scale(c) => ga.iter_mut().zip(g).for_each(|(d, g)| *d += c * g),
                    UnaryKind::AddScalar(_) => ga.iter_mut().zip(g).for_each(|(d, g)| *d += g),
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Reduce {
            input,
            axis,
            kind,
            argmax,
        } => {
            let shape = &nodes[*input].shape;
            let n = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            if let Some(ga) = accumulate(nodes, grads, *input) {
                match kind {
                    ReduceKind::Max => {
                        for (k, &src) in argmax.iter().enumerate() {
                            ga[src] += g[k];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let scale = if *kind == ReduceKind::Mean {
                            1.0 / n as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for j in 0..n {
                                let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                                let src = &g[o * inner..(o + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s * scale;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Permute { input, perm } => {
            if let Some(ga) = accumulate(nodes, grads, *input) {
                let inv = inverse_permutation(perm);
                let (_, back) = permute_data(&node.shape, g, &inv).expect("valid permutation");
                ga.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Concat { inputs, axis } => {
            let inner: usize = node.shape[axis + 1..].iter().product();
            let outer: usize = node.shape[..*axis].iter().product();
            let row = node.shape[*axis] * inner;
            let mut offset = 0;
            for &p in inputs {
                let chunk = nodes[p].shape[*axis] * inner;
                if let Some(gp) = accumulate(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + chunk];
                        let dst = &mut gp[o * chunk..(o + 1) * chunk];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += chunk;
            }
        }
        Op::Conv {
            input,
            kernel,
            bias,
            geom,
        } => {
            let x = &nodes[*input].value;
            let w = &nodes[*kernel].value;
            let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.out_c);
            let needs_w = nodes[*kernel].requires_grad;
            let needs_x = nodes[*input].requires_grad;
            if needs_w {
                let col = patches(geom, x);
                let gw = accumulate(nodes, grads, *kernel).expect("requires grad");
                gemm(patch, rows, cout, &col, true, g, false, gw, 1.0);
            }
            if needs_x {
                let gx = accumulate(nodes, grads, *input).expect("requires grad");
                if geom.is_pointwise() {
                    gemm(rows, cout, patch, g, false, w, true, gx, 1.0);
                } else {
                    let mut dcol = vec![0.0; rows * patch];
                    gemm(rows, cout, patch, g, false, w, true, &mut dcol, 0.0);
                    col2im(geom, &dcol, gx);
                }
            }
            if let Some(b) = bias {
                if let Some(gb) = accumulate(nodes, grads, *b) {
                    let s = column_sums(g, cout);
                    gb.iter_mut().zip(&s).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::ConvTranspose {
            input,
            kernel,
            bias,
            geom,
        } => {
            // `geom` describes the forward convolution this op transposes:
            // its input is our output and its output is our input.
            let x = &nodes[*input].value;
            let w = &nodes[*kernel].value;
            let (rows, patch, small_c) = (geom.rows(), geom.patch(), geom.out_c);
            let colg = patches(geom, g);
            if let Some(gw) = accumulate(nodes, grads, *kernel) {
                gemm(patch, rows, small_c, &colg, true, x, false, gw, 1.0);
            }
            if let Some(gx) = accumulate(nodes, grads, *input) {
                gemm(rows, patch, small_c, &colg, false, w, false, gx, 1.0);
            }
            if let Some(b) = bias {
                if let Some(gb) = accumulate(nodes, grads, *b) {
                    let s = column_sums(g, geom.in_c);
                    gb.iter_mut().zip(&s).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(ga) = accumulate(nodes, grads, *input) {
                for (k, &src) in argmax.iter().enumerate() {
                    ga[src] += g[k];
                }
            }
        }
        Op::Upsample { input, factor } => {
            let s = &nodes[*input].shape;
            let (b, l, c) = (s[0], s[1], s[2]);
            if let Some(ga) = accumulate(nodes, grads, *input) {
                for bi in 0..b {
                    for li in 0..l {
                        let dst = ((bi * l) + li) * c;
                        for r in 0..*factor {
                            let src = ((bi * l * factor) + li * factor + r) * c;
                            for ci in 0..c {
                                ga[dst + ci] += g[src + ci];
                            }
                        }
                    }
                }
            }
        }
        Op::AvgPool { input, size } => {
            let s = &nodes[*input].shape;
            let (b, l, c) = (s[0], s[1], s[2]);
            let lo = l / size;
            let scale = 1.0 / *size as f64;
            if let Some(ga) = accumulate(nodes, grads, *input) {
                for bi in 0..b {
                    for j in 0..lo {
                        let src = (bi * lo + j) * c;
                        for r in 0..*size {
                            let dst = (bi * l + j * size + r) * c;
                            for ci in 0..c {
                                ga[dst + ci] += g[src + ci] * scale;
                            }
                        }
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let bs = &nodes[*b].shape;
            let (k, n) = (bs[0], bs[1]);
            let m = nodes[*a].value.len() / k;
            if let Some(ga) = accumulate(nodes, grads, *a) {
                gemm(m, n, k, g, false, &nodes[*b].value, true, ga, 1.0);
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                gemm(k, m, n, &nodes[*a].value, true, g, false, gb, 1.0);
            }
        }
    }
}

fn binary_backward(
    nodes: &[Node],
    node: &Node,
    kind: BinaryKind,
    a: usize,
    b: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (av, bv) = (&nodes[a].value, &nodes[b].value);
    let (sa, sb) = (&nodes[a].shape, &nodes[b].shape);
    let same = sa == sb;
    let stra = broadcast_strides(sa, &node.shape);
    let strb = broadcast_strides(sb, &node.shape);
    let da = |i: usize, ib: usize| -> f64 {
        match kind {
            BinaryKind::Add | BinaryKind::Sub => g[i],
            BinaryKind::Mul => g[i] * bv[ib],
            BinaryKind::Div => g[i] / bv[ib],
        }
    };
    let db = |i: usize, ia: usize, ib: usize| -> f64 {
        match kind {
            BinaryKind::Add => g[i],
            BinaryKind::Sub => -g[i],
            BinaryKind::Mul => g[i] * av[ia],
            BinaryKind::Div => -g[i] * av[ia] / (bv[ib] * bv[ib]),
        }
    };
    if let Some(ga) = accumulate(nodes, grads, a) {
        if same {
            for i in 0..g.len() {
                ga[i] += da(i, i);
            }
        } else {
            for_each_broadcast(&node.shape, &stra, &strb, |i, ia, ib| ga[ia] += da(i, ib));
        }
    }
    if let Some(gb) = accumulate(nodes, grads, b) {
        if same {
            for i in 0..g.len() {
                gb[i] += db(i, i, i);
            }
        } else {
            for_each_broadcast(&node.shape, &stra, &strb, |i, ia, ib| {
                gb[ib] += db(i, ia, ib)
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shape")
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes()[self.id].value[0]
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind, op: &'static str) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let shape =
                broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| Error::ShapeMismatch {
                    op,
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                })?;
            let f = match kind {
                BinaryKind::Add => |x: f64, y: f64| x + y,
                BinaryKind::Sub => |x: f64, y: f64| x - y,
                BinaryKind::Mul => |x: f64, y: f64| x * y,
                BinaryKind::Div => |x: f64, y: f64| x / y,
            };
            let value: Vec<f64> = if na.shape == nb.shape {
                na.value
                    .iter()
                    .zip(&nb.value)
                    .map(|(&x, &y)| f(x, y))
                    .collect()
            } else {
                let sa = broadcast_strides(&na.shape, &shape);
                let sb = broadcast_strides(&nb.shape, &shape);
                let mut out = vec![0.0; numel(&shape)];
                for_each_broadcast(&shape, &sa, &sb, |i, ia, ib| {
                    out[i] = f(na.value[ia], nb.value[ib])
                });
                out
            };
            (shape, value)
        };
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        Ok(self
            .tape
            .push(shape, value, Op::Binary(kind, self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    fn unary(self, kind: UnaryKind) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let value = match kind {
                UnaryKind::Neg => n.value.iter().map(|v| -v).collect(),
                UnaryKind::Abs => n.value.iter().map(|v| v.abs()).collect(),
                UnaryKind::Pow(p) => n.value.iter().map(|&v| pow(v, p)).collect(),
                UnaryKind::Sigmoid => n.value.iter().map(|&v| sigmoid(v)).collect(),
                UnaryKind::Relu => n.value.iter().map(|&v| v.max(0.0)).collect(),
                UnaryKind::Scale(c) => n.value.iter().map(|v| c * v).collect(),
                UnaryKind::AddScalar(c) => n.value.iter().map(|v| v + c).collect(),
            };
            (n.shape.clone(), value)
        };
        let rg = self.requires_grad();
        self.tape.push(shape, value, Op::Unary(kind, self.id), rg)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::AddScalar(c))
    }

    /// `x^p`; negative bases need an integer exponent.
    pub fn pow_const(self, p: f64) -> Result<Var<'t>> {
        if p.fract() != 0.0 {
            let nodes = self.tape.nodes();
            if let Some(bad) = nodes[self.id].value.iter().find(|v| **v < 0.0) {
                return Err(Error::Domain(format!("pow({bad}, {p}) has no real value")));
            }
        }
        Ok(self.unary(UnaryKind::Pow(p)))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.tape.nodes()[self.id].value.iter().sum::<f64>();
        let rg = self.requires_grad();
        self.tape
            .push(vec![1], vec![total], Op::SumAll(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.nodes()[self.id].value.len();
        self.sum().scale(1.0 / n as f64)
    }

    fn reduce(self, axis: usize, kind: ReduceKind) -> Result<Var<'t>> {
        let (shape, value, argmax) = {
            let nodes = self.tape.nodes();
            let node = &nodes[self.id];
            let s = &node.shape;
            if axis >= s.len() {
                return Err(Error::InvalidShape {
                    op: "reduce",
                    msg: format!("axis {axis} out of range for {s:?}"),
                });
            }
            let n = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let outer: usize = s[..axis].iter().product();
            let mut value = vec![0.0; outer * inner];
            let mut argmax = Vec::new();
            if kind == ReduceKind::Max {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * n * inner + i;
                        for j in 1..n {
                            let idx = (o * n + j) * inner + i;
                            // strict comparison keeps the first index on ties
                            if node.value[idx] > node.value[best] {
                                best = idx;
                            }
                        }
                        value[o * inner + i] = node.value[best];
                        argmax[o * inner + i] = best;
                    }
                }
            } else {
                for o in 0..outer {
                    for j in 0..n {
                        let src = &node.value[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let dst = &mut value[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
                if kind == ReduceKind::Mean {
                    let scale = 1.0 / n as f64;
                    value.iter_mut().for_each(|v| *v *= scale);
                }
            }
            let mut shape = s.clone();
            shape[axis] = 1;
            (shape, value, argmax)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            shape,
            value,
            Op::Reduce {
                input: self.id,
                axis,
                kind,
                argmax,
            },
            rg,
        ))
    }

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, ReduceKind::Mean)
    }

    /// Max over `axis`, keeping it with size 1. Ties route the gradient to
    /// the first maximal index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, ReduceKind::Max)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, ReduceKind::Sum)
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            permute_data(&n.shape, &n.value, perm)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            shape,
            value,
            Op::Permute {
                input: self.id,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: "needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        validate_shape(shape)?;
        let (old, value) = {
            let nodes = self.tape.nodes();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        if numel(&old) != numel(shape) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    /// `(…, k) × (k, n) → (…, n)`.
    pub fn matmul(self, w: Var<'t>) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let (na, nb) = (&nodes[self.id], &nodes[w.id]);
            let k = *na.shape.last().expect("rank >= 1");
            if nb.shape.len() != 2 || nb.shape[0] != k {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let n = nb.shape[1];
            let m = na.value.len() / k;
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &na.value, false, &nb.value, false, &mut out, 0.0);
            let mut shape = na.shape.clone();
            *shape.last_mut().expect("rank >= 1") = n;
            (shape, out)
        };
        let rg = self.tape.needs_grad(&[self.id, w.id]);
        Ok(self.tape.push(shape, value, Op::MatMul(self.id, w.id), rg))
    }

    /// 2D cross-correlation. `self`: `(b, h, w, cin)`, `kernel`:
    /// `(kh, kw, cin, cout)`, `bias`: `(cout)`.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var<'t>> {
        let (geom, value) = {
            let nodes = self.tape.nodes();
            let xs = &nodes[self.id].shape;
            let ks = &nodes[kernel.id].shape;
            if xs.len() != 4 || ks.len() != 4 || ks[2] != xs[3] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs.clone(),
                    rhs: ks.clone(),
                });
            }
            if stride.0 == 0 || stride.1 == 0 {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    msg: "stride must be positive".into(),
                });
            }
            let same = padding == Padding::Same;
            let geo = |n, k, s| {
                axis_geometry(n, k, s, same).ok_or_else(|| Error::InvalidShape {
                    op: "conv2d",
                    msg: format!("input extent {n} shorter than kernel {k} with valid padding"),
                })
            };
            let (out_h, pad_h) = geo(xs[1], ks[0], stride.0)?;
            let (out_w, pad_w) = geo(xs[2], ks[1], stride.1)?;
            let geom = ConvGeom {
                batch: xs[0],
                in_h: xs[1],
                in_w: xs[2],
                in_c: xs[3],
                out_h,
                out_w,
                out_c: ks[3],
                kh: ks[0],
                kw: ks[1],
                sh: stride.0,
                sw: stride.1,
                pad_h,
                pad_w,
            };
            if let Some(b) = bias {
                check_bias(&nodes[b.id].shape, geom.out_c, "conv2d")?;
            }
            let col = patches(&geom, &nodes[self.id].value);
            let mut out = vec![0.0; geom.out_len()];
            gemm(
                geom.rows(),
                geom.patch(),
                geom.out_c,
                &col,
                false,
                &nodes[kernel.id].value,
                false,
                &mut out,
                0.0,
            );
            if let Some(b) = bias {
                add_bias(&mut out, &nodes[b.id].value);
            }
            (geom, out)
        };
        let mut ids = vec![self.id, kernel.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.tape.needs_grad(&ids);
        Ok(self.tape.push(
            vec![geom.batch, geom.out_h, geom.out_w, geom.out_c],
            value,
            Op::Conv {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Transpose of [`Var::conv2d`] with "same" padding: `(b, h, w, cin)`
    /// maps to `(b, h·sh, w·sw, cout)`. The kernel is stored as
    /// `(kh, kw, cout, cin)`, the layout of the convolution being
    /// transposed.
    pub fn conv_transpose2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: (usize, usize),
    ) -> Result<Var<'t>> {
        let (geom, value) = {
            let nodes = self.tape.nodes();
            let xs = &nodes[self.id].shape;
            let ks = &nodes[kernel.id].shape;
            if xs.len() != 4 || ks.len() != 4 || ks[3] != xs[3] {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d",
                    lhs: xs.clone(),
                    rhs: ks.clone(),
                });
            }
            if stride.0 == 0 || stride.1 == 0 {
                return Err(Error::InvalidShape {
                    op: "conv_transpose2d",
                    msg: "stride must be positive".into(),
                });
            }
            let (big_h, big_w) = (xs[1] * stride.0, xs[2] * stride.1);
            let (_, pad_h) = axis_geometry(big_h, ks[0], stride.0, true).expect("same");
            let (_, pad_w) = axis_geometry(big_w, ks[1], stride.1, true).expect("same");
            let geom = ConvGeom {
                batch: xs[0],
                in_h: big_h,
                in_w: big_w,
                in_c: ks[2],
                out_h: xs[1],
                out_w: xs[2],
                out_c: xs[3],
                kh: ks[0],
                kw: ks[1],
                sh: stride.0,
                sw: stride.1,
                pad_h,
                pad_w,
            };
            if let Some(b) = bias {
                check_bias(&nodes[b.id].shape, geom.in_c, "conv_transpose2d")?;
            }
            let mut dcol = vec![0.0; geom.rows() * geom.patch()];
            gemm(
                geom.rows(),
                geom.out_c,
                geom.patch(),
                &nodes[self.id].value,
                false,
                &nodes[kernel.id].value,
                true,
                &mut dcol,
                0.0,
            );
            let mut out = vec![0.0; geom.in_len()];
            col2im(&geom, &dcol, &mut out);
            if let Some(b) = bias {
                add_bias(&mut out, &nodes[b.id].value);
            }
            (geom, out)
        };
        let mut ids = vec![self.id, kernel.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.tape.needs_grad(&ids);
        Ok(self.tape.push(
            vec![geom.batch, geom.in_h, geom.in_w, geom.in_c],
            value,
            Op::ConvTranspose {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    fn rank3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                op,
                msg: format!("expected (batch, length, channels), got {s:?}"),
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Pairwise max along the length axis of `(b, l, c)`; `l` must be even.
    pub fn maxpool2(self) -> Result<Var<'t>> {
        let (b, l, c) = self.rank3("maxpool1d")?;
        if l % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "maxpool1d",
                msg: format!("length {l} is odd"),
            });
        }
        let lo = l / 2;
        let (value, argmax) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let mut value = Vec::with_capacity(b * lo * c);
            let mut argmax = Vec::with_capacity(b * lo * c);
            for bi in 0..b {
                for j in 0..lo {
                    for ci in 0..c {
                        let i0 = (bi * l + 2 * j) * c + ci;
                        let i1 = i0 + c;
                        let pick = if x[i1] > x[i0] { i1 } else { i0 };
                        value.push(x[pick]);
                        argmax.push(pick);
                    }
                }
            }
            (value, argmax)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            vec![b, lo, c],
            value,
            Op::MaxPool {
                input: self.id,
                argmax,
            },
            rg,
        ))
    }

    /// Nearest-neighbour repetition along the length axis.
    pub fn upsample(self, factor: usize) -> Result<Var<'t>> {
        let (b, l, c) = self.rank3("upsample1d")?;
        if factor == 0 {
            return Err(Error::InvalidShape {
                op: "upsample1d",
                msg: "factor must be positive".into(),
            });
        }
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let mut out = Vec::with_capacity(b * l * factor * c);
            for row in x.chunks_exact(c) {
                for _ in 0..factor {
                    out.extend_from_slice(row);
                }
            }
            out
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            vec![b, l * factor, c],
            value,
            Op::Upsample {
                input: self.id,
                factor,
            },
            rg,
        ))
    }

    /// Average over non-overlapping windows of `size` along the length axis.
    pub fn avgpool(self, size: usize) -> Result<Var<'t>> {
        let (b, l, c) = self.rank3("avgpool1d")?;
        if size == 0 || l % size != 0 {
            return Err(Error::InvalidShape {
                op: "avgpool1d",
                msg: format!("window {size} does not tile length {l}"),
            });
        }
        let lo = l / size;
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let mut out = vec![0.0; b * lo * c];
            for bi in 0..b {
                for j in 0..lo {
                    let dst = (bi * lo + j) * c;
                    for r in 0..size {
                        let src = (bi * l + j * size + r) * c;
                        for ci in 0..c {
                            out[dst + ci] += x[src + ci];
                        }
                    }
                }
            }
            let scale = 1.0 / size as f64;
            out.iter_mut().for_each(|v| *v *= scale);
            out
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            vec![b, lo, c],
            value,
            Op::AvgPool {
                input: self.id,
                size,
            },
            rg,
        ))
    }
}

fn check_bias(shape: &[usize], channels: usize, op: &'static str) -> Result<()> {
    if shape != [channels] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![channels],
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

/// `v^p` with exact fast paths for the exponents the layers use.
fn pow(v: f64, p: f64) -> f64 {
    if p == 2.0 {
        v * v
    } else if p == 0.5 {
        v.sqrt()
    } else if p == 1.0 {
        v
    } else {
        v.powf(p)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
