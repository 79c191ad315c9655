//! Train briefly, pull the graph-refined code and drug vectors out of the
//! model, and poke at their geometry: codes from the same planted cluster
//! should sit closer together than codes from different clusters.
//!
//!     cargo run --example export_embeddings

use ndarray::ArrayView1;

use tham::cograph::build_acc;
use tham::cohort::{make_examples, Task};
use tham::config::{ModelConfig, SynthConfig};
use tham::model::Tham;
use tham::synth;
use tham::tensor::Phase;
use tham::train::fit;

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let dot = a.dot(&b);
    let norms = a.dot(&a).sqrt() * b.dot(&b).sqrt();
    if norms == 0.0 {
        0.0
    } else {
        dot / norms
    }
}

fn main() -> tham::Result<()> {
    let generated = synth::generate(&SynthConfig { n_patients: 300, ..Default::default() })?;
    let cohort = &generated.cohort;

    let mut cfg = ModelConfig::defaults(Task::Diagnosis);
    cfg.m_c = 8;
    cfg.m_d = 8;
    cfg.gnn_code_dims = vec![16, 32];
    cfg.gnn_drug_dims = vec![8, 8];
    cfg.a = 16;
    cfg.q = 16;
    cfg.b = 16;
    cfg.heads = 2;
    cfg.ffn_size = 64;
    cfg.tree_depth = 3;
    cfg.epochs = 8;
    cfg.lr = 1e-2;
    cfg.lr_milestones = vec![];

    let examples = make_examples(cohort, Task::Diagnosis);
    let model = Tham::new(
        cfg.clone(),
        cohort.codes.clone(),
        cohort.drugs.clone(),
        Some(generated.tree.clone()),
        build_acc(cohort, cfg.lambda)?,
    )?;
    fit(&model, &examples, &examples, |_| {})?;

    let (code_feats, drug_feats) = model.graph_features(Phase::Eval)?;
    let codes = code_feats.values();
    println!(
        "code features {}x{}, drug features {}x{}",
        codes.nrows(),
        codes.ncols(),
        drug_feats.values().nrows(),
        drug_feats.values().ncols()
    );

    // mean cosine within vs across clusters
    let cluster_of = |i: usize| generated.truth.code_clusters[cohort.codes.name(i as u32)];
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for i in 0..codes.nrows() {
        for j in (i + 1)..codes.nrows() {
            let c = cosine(codes.row(i), codes.row(j));
            if cluster_of(i) == cluster_of(j) {
                within.push(c);
            } else {
                across.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean cosine within cluster {:.3}, across clusters {:.3}", mean(&within), mean(&across));

    // the TSV the export tool writes: kind, name, then the vector
    let dir = tempfile::tempdir().map_err(tham::Error::from)?;
    let path = dir.path().join("embeddings.tsv");
    let mut out = String::new();
    for (i, name) in cohort.codes.names().iter().enumerate() {
        let vals: Vec<String> = codes.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("code\t{name}\t{}\n", vals.join("\t")));
    }
    for (i, name) in cohort.drugs.names().iter().enumerate() {
        let vals: Vec<String> =
            drug_feats.values().row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("drug\t{name}\t{}\n", vals.join("\t")));
    }
    std::fs::write(&path, out).map_err(tham::Error::from)?;
    println!("wrote {}", path.display());
    Ok(())
}
