//! Heterogeneous graph layers over the drug-code graphs: cross-type
//! aggregation with residual identity, then a per-type linear update with
//! BatchNorm and LeakyReLU. The stack turns concatenated hierarchical
//! code embeddings into the code features every visit is averaged from.

use ndarray::Array2;
use rand::Rng;

use crate::cograph::CoGraphs;
use crate::error::Result;
use crate::optim::{xavier_fill, ParamSet};
use crate::tensor::{batchnorm, BatchNormState, Phase, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Batch normalization bundle: trainable affine plus running statistics.
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BatchNormState,
}

impl BnLayer {
    pub fn new(prefix: &str, features: usize, params: &mut ParamSet) -> Self {
        let gamma = params.register(
            format!("{prefix}.gamma"),
            Tensor::param(Array2::ones((1, features))),
        );
        let beta = params.register(
            format!("{prefix}.beta"),
            Tensor::param(Array2::zeros((1, features))),
        );
        BnLayer {
            gamma,
            beta,
            state: BatchNormState::new(features),
        }
    }

    pub fn apply(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        batchnorm(x, &self.gamma, &self.beta, &self.state, phase)
    }
}

/// Trainable pieces of one aggregate/update layer.
pub struct GnnLayer {
    /// Maps code features into drug width for the drug aggregation.
    pub w_cd: Tensor,
    /// Maps drug features into code width for the code aggregation.
    pub w_dc: Tensor,
    /// Code update: in_c -> out_c.
    pub w_c: Tensor,
    /// Drug update: in_d -> out_d.
    pub w_d: Tensor,
    pub bn_c: BnLayer,
    pub bn_d: BnLayer,
}

impl GnnLayer {
    /// `in_c`/`in_d` are this layer's input widths, `out_c`/`out_d` the
    /// next layer's. Parameters register under `prefix`.
    pub fn new<R: Rng>(
        prefix: &str,
        in_c: usize,
        in_d: usize,
        out_c: usize,
        out_d: usize,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Self {
        let w_cd = params.register(
            format!("{prefix}.w_cd"),
            Tensor::param(xavier_fill(in_c, in_d, rng)),
        );
        let w_dc = params.register(
            format!("{prefix}.w_dc"),
            Tensor::param(xavier_fill(in_d, in_c, rng)),
        );
        let w_c = params.register(
            format!("{prefix}.w_c"),
            Tensor::param(xavier_fill(in_c, out_c, rng)),
        );
        let w_d = params.register(
            format!("{prefix}.w_d"),
            Tensor::param(xavier_fill(in_d, out_d, rng)),
        );
        let bn_c = BnLayer::new(&format!("{prefix}.bn_c"), out_c, params);
        let bn_d = BnLayer::new(&format!("{prefix}.bn_d"), out_d, params);
        GnnLayer { w_cd, w_dc, w_c, w_d, bn_c, bn_d }
    }
}

/// Cross-type aggregation with residual identity: drugs gather code
/// features through the incidence rows, codes gather drug features back
/// through its transpose plus neighbor code features.
pub fn aggregate(
    h_c: &Tensor,
    h_d: &Tensor,
    b_dc: &Tensor,
    a_cc: &Tensor,
    layer: &GnnLayer,
) -> Result<(Tensor, Tensor)> {
    let m_d = h_d.add(&b_dc.matmul(&h_c.matmul(&layer.w_cd)?)?)?;
    let m_c = h_c
        .add(&b_dc.transpose().matmul(&h_d.matmul(&layer.w_dc)?)?)?
        .add(&a_cc.matmul(h_c)?)?;
    Ok((m_c, m_d))
}

/// Linear update, BatchNorm over the node axis, LeakyReLU.
pub fn update(
    m_c: &Tensor,
    m_d: &Tensor,
    layer: &GnnLayer,
    phase: Phase,
) -> Result<(Tensor, Tensor)> {
    let h_c = layer
        .bn_c
        .apply(&m_c.matmul(&layer.w_c)?, phase)?
        .leaky_relu(LEAKY_SLOPE);
    let h_d = layer
        .bn_d
        .apply(&m_d.matmul(&layer.w_d)?, phase)?
        .leaky_relu(LEAKY_SLOPE);
    Ok((h_c, h_d))
}

/// Run the full stack from initial embeddings; returns final code and
/// drug features.
pub fn forward(
    hier: &Tensor,
    drug_emb: &Tensor,
    graphs: &CoGraphs,
    layers: &[GnnLayer],
    phase: Phase,
) -> Result<(Tensor, Tensor)> {
    let b_dc = Tensor::constant(graphs.b_dc.clone());
    let a_cc = Tensor::constant(graphs.a_cc.clone());
    let mut h_c = hier.clone();
    let mut h_d = drug_emb.clone();
    for layer in layers {
        let (m_c, m_d) = aggregate(&h_c, &h_d, &b_dc, &a_cc, layer)?;
        let (c, d) = update(&m_c, &m_d, layer, phase)?;
        h_c = c;
        h_d = d;
    }
    Ok((h_c, h_d))
}

/// Straight-line re-derivation of one aggregation on plain arrays, used
/// as an oracle by the tests.
pub fn aggregate_reference(
    h_c: &Array2<f64>,
    h_d: &Array2<f64>,
    b_dc: &Array2<f64>,
    a_cc: &Array2<f64>,
    w_cd: &Array2<f64>,
    w_dc: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let m_d = h_d + &b_dc.dot(&h_c.dot(w_cd));
    let m_c = h_c + &b_dc.t().dot(&h_d.dot(w_dc)) + &a_cc.dot(h_c);
    (m_c, m_d)
}
