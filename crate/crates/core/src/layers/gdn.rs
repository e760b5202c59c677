//! Generalized divisive normalization.
//!
//! `y_i = z_i / (β_i + Σ_j γ_ij |z_j|^α)^ε` across the channels of every
//! position, with `α = 2`, `ε = 0.5` fixed and `z = x`. Only `β` and `γ`
//! are trainable; after each optimizer step they are projected onto
//! `β ≥ BETA_MIN`, `γ ≥ 0`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const GDN_ALPHA: f64 = 2.0;
pub const GDN_EPSILON: f64 = 0.5;
pub const BETA_MIN: f64 = 1e-6;

/// `(β + |x|^α γᵀ)^ε` over the last axis.
fn denominator<'t>(x: Var<'t>, beta: Var<'t>, gamma: Var<'t>) -> Result<Var<'t>> {
    let c = *x.shape().last().expect("rank >= 1");
    if beta.shape() != [c] || gamma.shape() != [c, c] {
        return Err(Error::ShapeMismatch {
            op: "gdn",
            lhs: x.shape(),
            rhs: gamma.shape(),
        });
    }
    let energy = x.abs().pow_const(GDN_ALPHA)?;
    let pooled = energy.matmul(gamma.transpose_last()?)?;
    pooled.add(beta)?.pow_const(GDN_EPSILON)
}

pub fn gdn<'t>(x: Var<'t>, beta: Var<'t>, gamma: Var<'t>) -> Result<Var<'t>> {
    x.div(denominator(x, beta, gamma)?)
}

/// One-step multiplicative inverse `x · (β + |x|^α γᵀ)^ε`. This is not the
/// exact inverse of [`gdn`]; see [`gdn_invert_exact`].
pub fn igdn<'t>(x: Var<'t>, beta: Var<'t>, gamma: Var<'t>) -> Result<Var<'t>> {
    x.mul(denominator(x, beta, gamma)?)
}

/// Solves `gdn(z) = y` by the fixed-point iteration
/// `z ← y · (β + γ|z|^α)^ε` starting from `z = y`. Stops once the max-norm
/// update falls to `tol`.
pub fn gdn_invert_exact(
    y: &Tensor,
    beta: &Tensor,
    gamma: &Tensor,
    iters: usize,
    tol: f64,
) -> Result<Tensor> {
    gdn_invert_exact_counted(y, beta, gamma, iters, tol).map(|(z, _)| z)
}

/// [`gdn_invert_exact`] that also reports the number of iterations used.
pub fn gdn_invert_exact_counted(
    y: &Tensor,
    beta: &Tensor,
    gamma: &Tensor,
    iters: usize,
    tol: f64,
) -> Result<(Tensor, usize)> {
    if iters == 0 || tol <= 0.0 {
        return Err(Error::Domain(format!(
            "need iters >= 1 and tol > 0, got {iters} and {tol}"
        )));
    }
    let c = *y.shape().last().expect("rank >= 1");
    if beta.shape() != [c] || gamma.shape() != [c, c] {
        return Err(Error::ShapeMismatch {
            op: "gdn_invert_exact",
            lhs: y.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let (b, g) = (beta.data(), gamma.data());
    let mut z = y.data().to_vec();
    let mut next = vec![0.0; z.len()];
    let mut residual = f64::INFINITY;
    for it in 1..=iters {
        residual = 0.0;
        for ((zr, nr), yr) in z
            .chunks_exact(c)
            .zip(next.chunks_exact_mut(c))
            .zip(y.data().chunks_exact(c))
        {
            for i in 0..c {
                let mut acc = b[i];
                for j in 0..c {
                    acc += g[i * c + j] * zr[j].abs().powf(GDN_ALPHA);
                }
                nr[i] = yr[i] * acc.powf(GDN_EPSILON);
                residual = residual.max((nr[i] - zr[i]).abs());
            }
        }
        std::mem::swap(&mut z, &mut next);
        if residual <= tol {
            return Ok((Tensor::new(y.shape().to_vec(), z)?, it));
        }
    }
    Err(Error::NonConvergence { residual, iters })
}

/// GDN (or IGDN when `inverse`) layer with trainable `β`, `γ`.
#[derive(Clone, Debug)]
pub struct Gdn {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub inverse: bool,
}

impl Gdn {
    /// `β = 1`, `γ = 1e-3 · I`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = store.add_bounded(
            format!("{name}.beta"),
            Tensor::full(vec![channels], 1.0),
            BETA_MIN,
        );
        let mut g = Tensor::zeros(vec![channels, channels]);
        for i in 0..channels {
            g.data_mut()[i * channels + i] = 1e-3;
        }
        let gamma = store.add_bounded(format!("{name}.gamma"), g, 0.0);
        Gdn {
            beta,
            gamma,
            inverse,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (beta, gamma) = (cx.var(self.beta), cx.var(self.gamma));
        if self.inverse {
            igdn(x, beta, gamma)
        } else {
            gdn(x, beta, gamma)
        }
    }
}
