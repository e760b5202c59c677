//! Dense row-major `f64` tensors and the shape arithmetic shared by the
//! autodiff engine.

use std::fmt;

use crate::error::{Error, Result};

/// A dense row-major array of `f64` with an optional gradient slot.
///
/// The shape is fixed at construction; `reshape` and `permute` return new
/// tensors.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!(
                    "shape {:?} holds {} elements but {} were given",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Tensor {
            shape: vec![n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if numel(&shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let (shape, data) = permute_data(&self.shape, &self.data, perm)?;
        Ok(Tensor {
            shape,
            data,
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            op: "tensor",
            msg: format!("dimensions must be positive, got {shape:?}"),
        });
    }
    Ok(())
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-axis broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `target` shape (zero on
/// broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every element of `target` in row-major order, yielding the flat
/// offsets into two broadcast operands.
pub(crate) fn for_each_broadcast(
    target: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = target.len();
    let total = numel(target);
    // The innermost axis is walked in a tight loop.
    let inner = target[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut out = 0;
    while out < total {
        let (mut a, mut b) = (oa, ob);
        for _ in 0..inner {
            f(out, a, b);
            out += 1;
            a += ia_step;
            b += ib_step;
        }
        // advance the outer odometer
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < target[axis] {
                break;
            }
            oa -= sa[axis] * target[axis];
            ob -= sb[axis] * target[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn check_permutation(rank: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::InvalidShape {
            op: "permute",
            msg: format!("permutation {perm:?} does not match rank {rank}"),
        });
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of 0..{rank}"),
            });
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Output axis `i` takes input axis `perm[i]`.
pub(crate) fn permute_data(
    shape: &[usize],
    data: &[f64],
    perm: &[usize],
) -> Result<(Vec<usize>, Vec<f64>)> {
    check_permutation(shape.len(), perm)?;
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let zero = vec![0; out_shape.len()];
    for_each_broadcast(&out_shape, &src_strides, &zero, |_, src, _| {
        out.push(data[src]);
    });
    Ok((out_shape, out))
}
