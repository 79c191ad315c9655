//! Merging the two attention phases into one weight vector and pooling
//! the hidden states with it.
//!
//! The gate maps the comprehensive query to a point on the 2-simplex;
//! since alpha, beta, and the gate are all normalized, gating then
//! renormalizing collapses to the plain convex combination
//! `eta_t = d1 * alpha_t + d2 * beta_t`, which is what we compute.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::{xavier_fill, ParamSet};
use crate::tensor::Tensor;

pub struct MergeParams {
    /// q x 2 projection of the comprehensive query onto two gate logits.
    pub w_x: Tensor,
    pub b_x: Tensor,
}

impl MergeParams {
    pub fn new<R: Rng>(prefix: &str, q: usize, params: &mut ParamSet, rng: &mut R) -> Self {
        MergeParams {
            w_x: params.register(format!("{prefix}.w_x"), Tensor::param(xavier_fill(q, 2, rng))),
            b_x: params.register(format!("{prefix}.b_x"), Tensor::param(Array2::zeros((1, 2)))),
        }
    }
}

/// Softmax over the two gate logits, a 1 x 2 row on the simplex.
pub fn adaptive_gate(query: &Tensor, params: &MergeParams) -> Result<Tensor> {
    Ok(query.matmul(&params.w_x)?.add(&params.b_x)?.softmax_rows())
}

/// `d1 * alpha + d2 * beta`, elementwise over 1 x T rows.
pub fn merge(alpha: &Tensor, beta: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if alpha.shape() != beta.shape() {
        return Err(Error::shape("merge", alpha.shape(), beta.shape()));
    }
    if delta.shape() != (1, 2) {
        return Err(Error::shape("merge", delta.shape(), (1, 2)));
    }
    let d1 = delta.slice_cols(0, 1)?;
    let d2 = delta.slice_cols(1, 1)?;
    alpha.scale_by(&d1)?.add(&beta.scale_by(&d2)?)
}

/// Attention pooling: `O = sum_t eta_t h_t`, a 1 x m row.
pub fn pool(h: &Tensor, eta: &Tensor) -> Result<Tensor> {
    if eta.shape() != (1, h.shape().0) {
        return Err(Error::shape("pool", eta.shape(), (1, h.shape().0)));
    }
    eta.matmul(h)
}
