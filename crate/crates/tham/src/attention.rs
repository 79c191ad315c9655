//! Sequence encoder and the two attention phases over its hidden states.
//!
//! The encoder is a post-norm transformer stack: multi-head scaled
//! dot-product self-attention and a position-wise feed-forward block,
//! each followed by residual + layer norm. No causal mask; a patient's
//! whole history attends to itself.
//!
//! Preliminary weights project each hidden state down to a small space
//! and score it against a learned context vector. Comprehensive weights
//! build a query from the last hidden state and score it against keys
//! derived from the visit intervals alone, so they can favor visits by
//! recency pattern independent of content.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::hgnn::LEAKY_SLOPE;
use crate::optim::{xavier_fill, ParamSet};
use crate::tensor::{dropout, layernorm, Phase, Tensor};
use crate::visit::{time_gate, TimeGateParams};

const LN_EPS: f64 = 1e-5;

pub struct EncoderLayer {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
    pub b_o: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl EncoderLayer {
    fn new<R: Rng>(prefix: &str, m: usize, ffn: usize, params: &mut ParamSet, rng: &mut R) -> Self {
        let mat = |params: &mut ParamSet, rng: &mut R, name: &str, r: usize, c: usize| {
            params.register(format!("{prefix}.{name}"), Tensor::param(xavier_fill(r, c, rng)))
        };
        let zeros = |params: &mut ParamSet, name: &str, c: usize| {
            params.register(format!("{prefix}.{name}"), Tensor::param(Array2::zeros((1, c))))
        };
        let ones = |params: &mut ParamSet, name: &str, c: usize| {
            params.register(format!("{prefix}.{name}"), Tensor::param(Array2::ones((1, c))))
        };
        EncoderLayer {
            w_q: mat(params, rng, "w_q", m, m),
            w_k: mat(params, rng, "w_k", m, m),
            w_v: mat(params, rng, "w_v", m, m),
            w_o: mat(params, rng, "w_o", m, m),
            b_q: zeros(params, "b_q", m),
            b_k: zeros(params, "b_k", m),
            b_v: zeros(params, "b_v", m),
            b_o: zeros(params, "b_o", m),
            ff_w1: mat(params, rng, "ff_w1", m, ffn),
            ff_b1: zeros(params, "ff_b1", ffn),
            ff_w2: mat(params, rng, "ff_w2", ffn, m),
            ff_b2: zeros(params, "ff_b2", m),
            ln1_gamma: ones(params, "ln1_gamma", m),
            ln1_beta: zeros(params, "ln1_beta", m),
            ln2_gamma: ones(params, "ln2_gamma", m),
            ln2_beta: zeros(params, "ln2_beta", m),
        }
    }
}

/// Encoder stack plus the preliminary-attention projection.
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
    pub heads: usize,
    /// m x b projection bringing hidden states down to the scoring space.
    pub p: Tensor,
    /// b x 1 context vector the projected states are scored against.
    pub w_alpha: Tensor,
}

impl EncoderParams {
    pub fn new<R: Rng>(
        prefix: &str,
        m: usize,
        b: usize,
        heads: usize,
        ffn: usize,
        n_layers: usize,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || m % heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {m} is not divisible into {heads} heads"
            )));
        }
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(&format!("{prefix}.{i}"), m, ffn, params, rng))
            .collect();
        Ok(EncoderParams {
            layers,
            heads,
            p: params.register(format!("{prefix}.p"), Tensor::param(xavier_fill(m, b, rng))),
            w_alpha: params
                .register(format!("{prefix}.w_alpha"), Tensor::param(xavier_fill(b, 1, rng))),
        })
    }
}

fn multi_head_self_attention(x: &Tensor, layer: &EncoderLayer, heads: usize) -> Result<Tensor> {
    let (_, m) = x.shape();
    let d = m / heads;
    let q = x.matmul(&layer.w_q)?.add_bias_rows(&layer.b_q)?;
    let k = x.matmul(&layer.w_k)?.add_bias_rows(&layer.b_k)?;
    let v = x.matmul(&layer.w_v)?.add_bias_rows(&layer.b_v)?;
    let mut heads_out = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * d, d)?;
        let kh = k.slice_cols(h * d, d)?;
        let vh = v.slice_cols(h * d, d)?;
        let scores = qh.matmul(&kh.transpose())?.scale(1.0 / (d as f64).sqrt());
        heads_out.push(scores.softmax_rows().matmul(&vh)?);
    }
    Tensor::concat_cols(&heads_out)?
        .matmul(&layer.w_o)?
        .add_bias_rows(&layer.b_o)
}

/// Run the encoder stack over a T x m visit sequence.
pub fn tte_forward<R: Rng>(
    v: &Tensor,
    params: &EncoderParams,
    rate: f64,
    rng: &mut R,
    phase: Phase,
) -> Result<Tensor> {
    let mut x = v.clone();
    for layer in &params.layers {
        let attn = multi_head_self_attention(&x, layer, params.heads)?;
        let attn = dropout(&attn, rate, rng, phase)?;
        x = layernorm(&x.add(&attn)?, &layer.ln1_gamma, &layer.ln1_beta, LN_EPS)?;
        let ff = x
            .matmul(&layer.ff_w1)?
            .add_bias_rows(&layer.ff_b1)?
            .leaky_relu(0.0)
            .matmul(&layer.ff_w2)?
            .add_bias_rows(&layer.ff_b2)?;
        let ff = dropout(&ff, rate, rng, phase)?;
        x = layernorm(&x.add(&ff)?, &layer.ln2_gamma, &layer.ln2_beta, LN_EPS)?;
    }
    Ok(x)
}

/// Preliminary weights: softmax over `(h_t P) . w_alpha` scores, 1 x T.
pub fn preliminary_attention(h: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let scores = h.matmul(&params.p)?.matmul(&params.w_alpha)?;
    Ok(scores.transpose().softmax_rows())
}

/// Query projection and interval-keyed attention parameters.
pub struct CompAttnParams {
    /// m x q query projection of the last hidden state.
    pub w_q: Tensor,
    pub b_q: Tensor,
    /// Interval gate producing q-dimensional keys; its own parameters,
    /// not shared with the visit-level gate.
    pub key_gate: TimeGateParams,
}

impl CompAttnParams {
    pub fn new<R: Rng>(
        prefix: &str,
        m: usize,
        q: usize,
        a: usize,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Self {
        CompAttnParams {
            w_q: params.register(format!("{prefix}.w_q"), Tensor::param(xavier_fill(m, q, rng))),
            b_q: params.register(format!("{prefix}.b_q"), Tensor::param(Array2::zeros((1, q)))),
            key_gate: TimeGateParams::new(&format!("{prefix}.key"), a, q, params, rng),
        }
    }
}

/// Comprehensive weights over the sequence plus the query they came
/// from. The query reads only the last hidden state; keys read only the
/// intervals, so the weights are recency-pattern driven.
pub fn comprehensive_attention(
    h: &Tensor,
    intervals: &[i64],
    params: &CompAttnParams,
    divisor: f64,
) -> Result<(Tensor, Tensor)> {
    let (t_len, _) = h.shape();
    if intervals.len() != t_len {
        return Err(Error::shape("comprehensive_attention", (t_len, 1), (intervals.len(), 1)));
    }
    let q_dim = params.w_q.shape().1;
    let query = h
        .gather_rows(&[t_len - 1])?
        .matmul(&params.w_q)?
        .add(&params.b_q)?
        .leaky_relu(LEAKY_SLOPE);
    let keys: Vec<Tensor> = intervals
        .iter()
        .map(|&dt| Ok(time_gate(dt as f64, &params.key_gate, divisor)?.leaky_relu(LEAKY_SLOPE)))
        .collect::<Result<_>>()?;
    let keys = Tensor::concat_rows(&keys)?;
    let logits = query.matmul(&keys.transpose())?.scale(1.0 / (q_dim as f64).sqrt());
    Ok((logits.softmax_rows(), query))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{grad_check, GradCheckOptions};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn encoder(m: usize, layers: usize, seed: u64) -> (EncoderParams, ParamSet) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let enc = EncoderParams::new("enc", m, 3, 2, 4 * m, layers, &mut params, &mut rng).unwrap();
        (enc, params)
    }

    #[test]
    fn encoder_preserves_shape_over_layers() {
        let (enc, _) = encoder(8, 2, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let v = Tensor::constant(xavier_fill(5, 8, &mut rng));
        let h = tte_forward(&v, &enc, 0.0, &mut rng, Phase::Eval).unwrap();
        assert_eq!(h.shape(), (5, 8));
    }

    #[test]
    fn post_norm_rows_come_out_standardized() {
        // the stack ends in a layer norm with unit gamma, zero beta, so
        // every output row has near-zero mean and near-unit variance
        let (enc, _) = encoder(8, 1, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let v = Tensor::constant(xavier_fill(4, 8, &mut rng));
        let h = tte_forward(&v, &enc, 0.0, &mut rng, Phase::Eval).unwrap();
        for row in h.values().rows() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|x| (x - mean) * (x - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn indivisible_head_split_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        assert!(EncoderParams::new("enc", 6, 3, 4, 8, 1, &mut params, &mut rng).is_err());
    }

    #[test]
    fn singleton_sequence_gets_full_weight_in_both_phases() {
        let (enc, _) = encoder(4, 1, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let v = Tensor::constant(xavier_fill(1, 4, &mut rng));
        let h = tte_forward(&v, &enc, 0.0, &mut rng, Phase::Eval).unwrap();
        let alpha = preliminary_attention(&h, &enc).unwrap();
        assert_eq!(alpha.values()[(0, 0)], 1.0);
        let mut params = ParamSet::new();
        let cattn = CompAttnParams::new("cattn", 4, 4, 2, &mut params, &mut rng);
        let (beta, query) = comprehensive_attention(&h, &[0], &cattn, 180.0).unwrap();
        assert_eq!(beta.values()[(0, 0)], 1.0);
        assert_eq!(query.shape(), (1, 4));
    }

    #[test]
    fn preliminary_weights_follow_hand_softmax() {
        // identity projection, so scores equal the single hidden column
        let enc = EncoderParams {
            layers: vec![],
            heads: 1,
            p: Tensor::param(array![[1.0]]),
            w_alpha: Tensor::param(array![[1.0]]),
        };
        let h = Tensor::constant(array![[3f64.ln()], [0.0]]);
        let alpha = preliminary_attention(&h, &enc).unwrap();
        assert!((alpha.values()[(0, 0)] - 0.75).abs() < 1e-12);
        assert!((alpha.values()[(0, 1)] - 0.25).abs() < 1e-12);

        let equal = Tensor::constant(array![[0.4], [0.4]]);
        let alpha = preliminary_attention(&equal, &enc).unwrap();
        assert_eq!(alpha.values()[(0, 0)], 0.5);
    }

    #[test]
    fn comprehensive_weights_follow_hand_scaled_dot_softmax() {
        // q = 1, query forced to [2]; gate dims pick keys 1.0 and 0.5:
        // the second damp channel is 1 - tanh(0) = 1 at dt = 0 and
        // saturates to exactly 0 at dt = 100, so keys are 0.5 + 0.5 and
        // 0.5 + 0. Logits [2, 1] -> softmax [0.7311, 0.2689].
        let cattn = CompAttnParams {
            w_q: Tensor::param(array![[2.0]]),
            b_q: Tensor::param(array![[0.0]]),
            key_gate: TimeGateParams {
                w_e: Tensor::param(array![[0.0, 1.0]]),
                b_e: Tensor::param(array![[0.0, 0.0]]),
                w_f: Tensor::param(array![[0.5], [0.5]]),
                b_f: Tensor::param(array![[0.0]]),
            },
        };
        let h = Tensor::constant(array![[5.0], [1.0]]);
        let (beta, query) = comprehensive_attention(&h, &[0, 100], &cattn, 1.0).unwrap();
        assert_eq!(query.values()[(0, 0)], 2.0);
        assert!((beta.values()[(0, 0)] - 0.7311).abs() < 1e-4);
        assert!((beta.values()[(0, 1)] - 0.2689).abs() < 1e-4);
        let sum: f64 = beta.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_intervals_give_uniform_comprehensive_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        let cattn = CompAttnParams::new("cattn", 4, 4, 2, &mut params, &mut rng);
        let h = Tensor::constant(xavier_fill(5, 4, &mut rng));
        let (beta, _) = comprehensive_attention(&h, &[30; 5], &cattn, 180.0).unwrap();
        for t in 0..5 {
            assert!((beta.values()[(0, t)] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn comprehensive_weights_ignore_earlier_hidden_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut params = ParamSet::new();
        let cattn = CompAttnParams::new("cattn", 4, 3, 2, &mut params, &mut rng);
        let rows = xavier_fill(4, 4, &mut rng);
        let intervals = [0, 12, 40, 7];
        let h = Tensor::constant(rows.clone());
        let (beta, _) = comprehensive_attention(&h, &intervals, &cattn, 180.0).unwrap();
        // swap the first two rows, keep the last row and intervals fixed
        let mut shuffled = rows;
        for c in 0..4 {
            shuffled.swap((0, c), (1, c));
        }
        let (beta2, _) =
            comprehensive_attention(&Tensor::constant(shuffled), &intervals, &cattn, 180.0)
                .unwrap();
        assert_eq!(*beta.values(), *beta2.values());
    }

    #[test]
    fn both_attention_paths_pass_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let enc = EncoderParams::new("enc", 4, 3, 2, 8, 1, &mut params, &mut rng).unwrap();
        let cattn = CompAttnParams::new("cattn", 4, 3, 2, &mut params, &mut rng);
        let v = params.register("v", Tensor::param(xavier_fill(3, 4, &mut rng)));
        let probe = Tensor::constant(array![[0.3], [-1.1], [0.7]]);
        let f = move || {
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let h = tte_forward(&v, &enc, 0.0, &mut rng, Phase::Eval)?;
            let alpha = preliminary_attention(&h, &enc)?;
            let (beta, query) = comprehensive_attention(&h, &[0, 20, 65], &cattn, 180.0)?;
            // weigh both distributions against a fixed probe so their
            // gradients cannot cancel to zero by normalization
            alpha
                .matmul(&probe)?
                .add(&beta.matmul(&probe)?)?
                .add(&query.mean_rows()?.slice_cols(0, 1)?)
        };
        let report = grad_check(f, &params, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn dropout_in_train_phase_perturbs_but_eval_does_not() {
        let (enc, _) = encoder(4, 1, 12);
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let v = Tensor::constant(xavier_fill(3, 4, &mut rng));
        let base = tte_forward(&v, &enc, 0.5, &mut rng, Phase::Eval).unwrap();
        let again = tte_forward(&v, &enc, 0.5, &mut rng, Phase::Eval).unwrap();
        assert_eq!(*base.values(), *again.values());
        let trained = tte_forward(&v, &enc, 0.5, &mut rng, Phase::Train).unwrap();
        assert_ne!(*base.values(), *trained.values());
    }
}
