//! Visit-level encoding: the mean of a visit's code features, an
//! additive interval gate, and sinusoidal positions.
//!
//! The gate is deliberately non-monotone in the interval: it peaks where
//! `w_e * dt/divisor + b_e` crosses zero and decays symmetrically on both
//! sides, letting the model key on "about this long since last time"
//! rather than only "long ago means less".

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::{xavier_fill, ParamSet};
use crate::tensor::Tensor;

/// Trainable interval gate: maps a day count to an m-vector added into
/// the visit embedding.
pub struct TimeGateParams {
    /// 1 x a scale of the normalized interval.
    pub w_e: Tensor,
    /// 1 x a shift.
    pub b_e: Tensor,
    /// a x m projection into the visit embedding.
    pub w_f: Tensor,
    /// 1 x m output shift.
    pub b_f: Tensor,
}

impl TimeGateParams {
    pub fn new<R: Rng>(prefix: &str, a: usize, m: usize, params: &mut ParamSet, rng: &mut R) -> Self {
        TimeGateParams {
            w_e: params.register(format!("{prefix}.w_e"), Tensor::param(xavier_fill(1, a, rng))),
            b_e: params.register(format!("{prefix}.b_e"), Tensor::param(Array2::zeros((1, a)))),
            w_f: params.register(format!("{prefix}.w_f"), Tensor::param(xavier_fill(a, m, rng))),
            b_f: params.register(format!("{prefix}.b_f"), Tensor::param(Array2::zeros((1, m)))),
        }
    }
}

/// `w_f (1 - tanh((w_e * dt/divisor + b_e)^2)) + b_f`, a 1 x m row.
pub fn time_gate(interval_days: f64, gate: &TimeGateParams, divisor: f64) -> Result<Tensor> {
    let inner = gate.w_e.scale(interval_days / divisor).add(&gate.b_e)?;
    let damp = inner.square().tanh().affine(-1.0, 1.0);
    damp.matmul(&gate.w_f)?.add(&gate.b_f)
}

/// Sinusoidal position row: even columns `sin(t / 10000^(2i/m))`, odd
/// columns the matching cosine. Positions are 0-indexed, so row 0 is
/// all zeros and ones.
pub fn positional_row(t: usize, m: usize) -> Result<Array2<f64>> {
    if m % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding wants an even width, got m = {m}"
        )));
    }
    let mut row = Array2::zeros((1, m));
    for i in 0..m / 2 {
        let rate = 10000f64.powf(2.0 * i as f64 / m as f64);
        row[(0, 2 * i)] = (t as f64 / rate).sin();
        row[(0, 2 * i + 1)] = (t as f64 / rate).cos();
    }
    Ok(row)
}

/// Mean of the selected feature rows; `code_rows` indexes into `features`.
pub fn visit_mean(features: &Tensor, code_rows: &[usize]) -> Result<Tensor> {
    if code_rows.is_empty() {
        return Err(Error::Config("visit without codes cannot be encoded".into()));
    }
    features.gather_rows(code_rows)?.mean_rows()
}

/// Encode a visit history into a T x m matrix: per visit, the code mean
/// plus the interval gate (unless ablated away via `gate = None`) plus
/// the position row.
pub fn encode_sequence(
    visit_codes: &[Vec<usize>],
    intervals: &[i64],
    features: &Tensor,
    gate: Option<&TimeGateParams>,
    divisor: f64,
) -> Result<Tensor> {
    if visit_codes.is_empty() {
        return Err(Error::Config("empty history cannot be encoded".into()));
    }
    if visit_codes.len() != intervals.len() {
        return Err(Error::shape(
            "encode_sequence",
            (visit_codes.len(), 1),
            (intervals.len(), 1),
        ));
    }
    let m = features.shape().1;
    let mut rows = Vec::with_capacity(visit_codes.len());
    for (t, codes) in visit_codes.iter().enumerate() {
        let mut row = visit_mean(features, codes)?;
        if let Some(gate) = gate {
            row = row.add(&time_gate(intervals[t] as f64, gate, divisor)?)?;
        }
        rows.push(row.add(&Tensor::constant(positional_row(t, m)?))?);
    }
    Tensor::concat_rows(&rows)
}
