//! GEMM wrapper and the im2col/col2im kernels behind the convolution ops.

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, both row-major.
/// `ta`/`tb` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover m×k, k×n and m×n elements with the strides
    // computed above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2D cross-correlation on `(batch, h, w, channels)` data.
/// 1D convolutions use `w = 1`, `kw = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    /// 1×1 kernel, unit stride, no padding: im2col is the identity.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.sh == 1
            && self.sw == 1
            && self.pad_h == 0
            && self.pad_w == 0
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.in_h * self.in_w * self.in_c
    }

    pub fn out_len(&self) -> usize {
        self.rows() * self.out_c
    }
}

/// Output size and leading pad of one spatial axis.
pub(crate) fn axis_geometry(n: usize, k: usize, s: usize, same: bool) -> Option<(usize, usize)> {
    if same {
        let out = n.div_ceil(s);
        let total = ((out - 1) * s + k).saturating_sub(n);
        Some((out, total / 2))
    } else if n >= k {
        Some(((n - k) / s + 1, 0))
    } else {
        None
    }
}

/// Patch matrix of `x`, borrowing the input when the convolution is
/// pointwise and the input already is that matrix.
pub(crate) fn patches<'a>(g: &ConvGeom, x: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
    if g.is_pointwise() {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(im2col(g, x))
    }
}

pub(crate) fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let mut col = vec![0.0; g.rows() * g.patch()];
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let dst = &mut col[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let ih = (oh * g.sh + ky) as isize - g.pad_h as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let iw = (ow * g.sw + kx) as isize - g.pad_w as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        let src = ((b * g.in_h + ih as usize) * g.in_w + iw as usize) * g.in_c;
                        let off = (ky * g.kw + kx) * g.in_c;
                        dst[off..off + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Scatter-adds patch rows back into an input-shaped buffer.
pub(crate) fn col2im(g: &ConvGeom, col: &[f64], x: &mut [f64]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let srcrow = &col[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let ih = (oh * g.sh + ky) as isize - g.pad_h as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let iw = (ow * g.sw + kx) as isize - g.pad_w as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((b * g.in_h + ih as usize) * g.in_w + iw as usize) * g.in_c;
                        let off = (ky * g.kw + kx) * g.in_c;
                        for c in 0..g.in_c {
                            x[dst + c] += srcrow[off + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[r, c] += bias[c]` for every row.
pub(crate) fn add_bias(out: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Column sums of a row-major `rows × n` buffer.
pub(crate) fn column_sums(g: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for row in g.chunks_exact(n) {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}
