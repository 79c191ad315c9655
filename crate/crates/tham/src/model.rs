//! Full model assembly: code and drug embeddings through the graph
//! layers, visit encoding, the sequence encoder with both attention
//! phases, adaptive merging, and the prediction head.
//!
//! Parameter registration order is part of the checkpoint and optimizer
//! state contract; `Tham::new` is the single place that fixes it.
//! Ablation flags never change which parameters exist, only which ones
//! the forward pass touches, so flipping a flag is provable from the
//! gradients alone.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    comprehensive_attention, preliminary_attention, tte_forward, CompAttnParams, EncoderParams,
};
use crate::cograph::CoGraphs;
use crate::cohort::{Example, Target, Task, Visit, Vocab};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::hgnn::{self, GnnLayer, LEAKY_SLOPE};
use crate::merge::{adaptive_gate, merge, pool, MergeParams};
use crate::metrics::top_k_indices;
use crate::ontology::OntologyTree;
use crate::optim::{xavier_fill, ParamSet};
use crate::tensor::{Phase, Tensor};
use crate::visit::{encode_sequence, TimeGateParams};

/// Feature row index for history codes outside the training vocabulary.
/// It selects the all-zero row appended by [`extend_features`]; the
/// unknown code still counts toward the visit mean's denominator.
pub fn unk_row(n_codes: usize) -> usize {
    n_codes
}

enum CodeBase {
    /// One trainable matrix per ontology level, gathered and
    /// concatenated along each code's root-to-leaf path.
    Levels(Vec<Tensor>),
    /// Unstructured per-code matrix (hierarchy ablation).
    Flat(Tensor),
}

/// Per-visit attention weights of one forward pass, for inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub alpha: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta: Option<(f64, f64)>,
    pub eta: Vec<f64>,
}

pub struct Tham {
    pub config: ModelConfig,
    pub codes: Vocab,
    pub drugs: Vocab,
    pub tree: Option<OntologyTree>,
    pub graphs: CoGraphs,
    pub params: ParamSet,
    base: CodeBase,
    drug_emb: Tensor,
    gnn: Vec<GnnLayer>,
    visit_gate: TimeGateParams,
    encoder: EncoderParams,
    cattn: CompAttnParams,
    merge_gate: MergeParams,
    head: Vec<(Tensor, Tensor)>,
}

impl Tham {
    pub fn new(
        config: ModelConfig,
        codes: Vocab,
        drugs: Vocab,
        tree: Option<OntologyTree>,
        graphs: CoGraphs,
    ) -> Result<Tham> {
        config.validate()?;
        let n_codes = codes.len();
        let n_drugs = drugs.len();
        if n_codes == 0 {
            return Err(Error::Config("cannot build a model over an empty code vocabulary".into()));
        }
        if n_drugs == 0 {
            return Err(Error::Config(
                "the drug-disease graph needs at least one drug in the vocabulary".into(),
            ));
        }
        if graphs.a_cc.dim() != (n_codes, n_codes) || graphs.b_dc.dim() != (n_drugs, n_codes) {
            return Err(Error::shape("Tham::new graphs", graphs.b_dc.dim(), (n_drugs, n_codes)));
        }

        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let h = config.tree_depth;

        let base = if config.no_hierarchy {
            CodeBase::Flat(params.register(
                "emb.codes",
                Tensor::param(xavier_fill(n_codes, h * config.m_c, &mut rng)),
            ))
        } else {
            let tree_ref = tree.as_ref().ok_or_else(|| {
                Error::Config("hierarchical code embeddings need an ontology".into())
            })?;
            if tree_ref.depth != h {
                return Err(Error::Config(format!(
                    "ontology depth {} does not match configured tree_depth {h}",
                    tree_ref.depth
                )));
            }
            if tree_ref.leaf_paths.len() != n_codes {
                return Err(Error::Config(format!(
                    "ontology covers {} codes but the vocabulary has {n_codes}",
                    tree_ref.leaf_paths.len()
                )));
            }
            CodeBase::Levels(
                tree_ref
                    .level_sizes
                    .iter()
                    .enumerate()
                    .map(|(lvl, &sz)| {
                        params.register(
                            format!("emb.level{lvl}"),
                            Tensor::param(xavier_fill(sz, config.m_c, &mut rng)),
                        )
                    })
                    .collect(),
            )
        };

        let drug_emb = params.register(
            "emb.drugs",
            Tensor::param(xavier_fill(n_drugs, config.m_d, &mut rng)),
        );

        let mut dims_c = vec![h * config.m_c];
        dims_c.extend(&config.gnn_code_dims);
        let mut dims_d = vec![config.m_d];
        dims_d.extend(&config.gnn_drug_dims);
        let gnn = (0..config.gnn_code_dims.len())
            .map(|l| {
                GnnLayer::new(
                    &format!("gnn.{l}"),
                    dims_c[l],
                    dims_d[l],
                    dims_c[l + 1],
                    dims_d[l + 1],
                    &mut params,
                    &mut rng,
                )
            })
            .collect();

        let m = config.m();
        let visit_gate = TimeGateParams::new("visit_gate", config.a, m, &mut params, &mut rng);
        let encoder = EncoderParams::new(
            "enc",
            m,
            config.b,
            config.heads,
            config.ffn_size,
            config.encoder_layers,
            &mut params,
            &mut rng,
        )?;
        let cattn = CompAttnParams::new("cattn", m, config.q, config.a, &mut params, &mut rng);
        let merge_gate = MergeParams::new("merge", config.q, &mut params, &mut rng);

        let out_dim = match config.task {
            Task::Diagnosis => n_codes,
            Task::HeartFailure => 1,
        };
        let head = (0..config.head_depth)
            .map(|i| {
                let out = if i + 1 == config.head_depth { out_dim } else { m };
                let w = params.register(
                    format!("head.{i}.w"),
                    Tensor::param(xavier_fill(m, out, &mut rng)),
                );
                let b = params
                    .register(format!("head.{i}.b"), Tensor::param(Array2::zeros((1, out))));
                (w, b)
            })
            .collect();

        Ok(Tham {
            config,
            codes,
            drugs,
            tree,
            graphs,
            params,
            base,
            drug_emb,
            gnn,
            visit_gate,
            encoder,
            cattn,
            merge_gate,
            head,
        })
    }

    /// Input code embeddings: hierarchical assembly, or the flat matrix
    /// under the hierarchy ablation.
    pub fn base_embeddings(&self) -> Result<Tensor> {
        match &self.base {
            CodeBase::Flat(t) => Ok(t.clone()),
            CodeBase::Levels(levels) => {
                let tree = self.tree.as_ref().expect("levels imply a tree");
                tree.assemble(levels)
            }
        }
    }

    /// Graph-refined features: code rows |C| x m, drug rows |D| x m_d'.
    pub fn graph_features(&self, phase: Phase) -> Result<(Tensor, Tensor)> {
        let base = self.base_embeddings()?;
        hgnn::forward(&base, &self.drug_emb, &self.graphs, &self.gnn, phase)
    }

    /// Number of visit-embedding columns.
    pub fn m(&self) -> usize {
        self.config.m()
    }

    /// Graph layers in order; checkpoints read the normalization
    /// running statistics through this.
    pub fn gnn_layers(&self) -> &[GnnLayer] {
        &self.gnn
    }

    fn gate(&self) -> Option<&TimeGateParams> {
        if self.config.ablate_time() {
            None
        } else {
            Some(&self.visit_gate)
        }
    }

    fn head_logits(&self, pooled: &Tensor) -> Result<Tensor> {
        let mut x = pooled.clone();
        for (i, (w, b)) in self.head.iter().enumerate() {
            x = x.matmul(w)?.add(b)?;
            if i + 1 < self.head.len() {
                x = x.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(x)
    }

    fn forward_rows(
        &self,
        features: &Tensor,
        rows: &[Vec<usize>],
        intervals: &[i64],
        rng: &mut ChaCha20Rng,
        phase: Phase,
        want_trace: bool,
    ) -> Result<(Tensor, Option<AttentionTrace>)> {
        let v = encode_sequence(rows, intervals, features, self.gate(), self.config.time_divisor)?;
        let h = tte_forward(&v, &self.encoder, self.config.dropout, rng, phase)?;
        let alpha = preliminary_attention(&h, &self.encoder)?;
        let (eta, beta, delta) = if self.config.ablate_comprehensive() {
            (alpha.clone(), None, None)
        } else {
            let (beta, query) =
                comprehensive_attention(&h, intervals, &self.cattn, self.config.time_divisor)?;
            let delta = adaptive_gate(&query, &self.merge_gate)?;
            let eta = merge(&alpha, &beta, &delta)?;
            (eta, Some(beta), Some(delta))
        };
        let pooled = pool(&h, &eta)?;
        let probs = self.head_logits(&pooled)?.sigmoid();
        let trace = want_trace.then(|| AttentionTrace {
            alpha: alpha.values().row(0).to_vec(),
            beta: beta.as_ref().map(|b| b.values().row(0).to_vec()),
            delta: delta.as_ref().map(|d| (d.values()[(0, 0)], d.values()[(0, 1)])),
            eta: eta.values().row(0).to_vec(),
        });
        Ok((probs, trace))
    }

    /// One patient's probabilities (1 x |C| or 1 x 1) from a prepared
    /// history against already-computed code features.
    pub fn forward_patient(
        &self,
        features: &Tensor,
        rows: &[Vec<usize>],
        intervals: &[i64],
        rng: &mut ChaCha20Rng,
        phase: Phase,
    ) -> Result<Tensor> {
        Ok(self.forward_rows(features, rows, intervals, rng, phase, false)?.0)
    }

    /// Like [`forward_patient`] but also reports the attention weights.
    pub fn trace_patient(
        &self,
        features: &Tensor,
        rows: &[Vec<usize>],
        intervals: &[i64],
        rng: &mut ChaCha20Rng,
        phase: Phase,
    ) -> Result<(Tensor, AttentionTrace)> {
        let (probs, trace) = self.forward_rows(features, rows, intervals, rng, phase, true)?;
        Ok((probs, trace.expect("trace requested")))
    }

    /// Batch forward over examples; rows stack in input order.
    pub fn forward_examples(
        &self,
        features: &Tensor,
        examples: &[&Example],
        rng: &mut ChaCha20Rng,
        phase: Phase,
    ) -> Result<Tensor> {
        let out: Vec<Tensor> = examples
            .iter()
            .map(|ex| {
                self.forward_patient(features, &history_rows(&ex.history), &ex.intervals, rng, phase)
            })
            .collect::<Result<_>>()?;
        Tensor::concat_rows(&out)
    }

    /// Multi-hot (diagnosis) or single-flag (heart failure) target rows
    /// for a batch, in example order.
    pub fn target_matrix(&self, examples: &[&Example]) -> Result<Tensor> {
        let n_codes = self.codes.len();
        let out_dim = match self.config.task {
            Task::Diagnosis => n_codes,
            Task::HeartFailure => 1,
        };
        let mut y = Array2::zeros((examples.len(), out_dim));
        for (i, ex) in examples.iter().enumerate() {
            match (&ex.target, self.config.task) {
                (Target::Codes(codes), Task::Diagnosis) => {
                    for &c in codes {
                        if (c as usize) < n_codes {
                            y[(i, c as usize)] = 1.0;
                        }
                    }
                }
                (Target::Flag(f), Task::HeartFailure) => {
                    y[(i, 0)] = if *f { 1.0 } else { 0.0 };
                }
                (t, task) => {
                    return Err(Error::Config(format!(
                        "example {} carries a {} target but the model task is {}",
                        ex.patient_id,
                        match t {
                            Target::Codes(_) => "diagnosis",
                            Target::Flag(_) => "heart_failure",
                        },
                        task.as_str()
                    )));
                }
            }
        }
        Ok(Tensor::constant(y))
    }
}

/// Append the all-zero unknown-code row to graph-refined code features.
pub fn extend_features(code_features: &Tensor) -> Result<Tensor> {
    let m = code_features.shape().1;
    Tensor::concat_rows(&[code_features.clone(), Tensor::constant(Array2::zeros((1, m)))])
}

/// Visit code ids as feature row indices.
pub fn history_rows(history: &[Visit]) -> Vec<Vec<usize>> {
    history.iter().map(|v| v.codes.iter().map(|&c| c as usize).collect()).collect()
}

/// Mean-over-samples, sum-over-labels binary cross-entropy with the
/// probabilities clamped to [1e-7, 1 - 1e-7] before the logs.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("bce", pred.shape(), target.shape()));
    }
    let n = pred.shape().0 as f64;
    let p = pred.clamp(1e-7, 1.0 - 1e-7);
    let pos = target.mul(&p.ln())?;
    let neg = target.affine(-1.0, 1.0).mul(&p.affine(-1.0, 1.0).ln())?;
    Ok(pos.add(&neg)?.sum_all().scale(-1.0 / n))
}

/// Top-k (code id, probability) pairs, scores descending, ties broken
/// by ascending code id; k is clamped to the row width.
pub fn predict_topk(probs: &Tensor, k: usize) -> Vec<(u32, f64)> {
    let row: Vec<f64> = probs.values().row(0).to_vec();
    top_k_indices(&row, k).into_iter().map(|c| (c as u32, row[c])).collect()
}
