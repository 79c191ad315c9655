//! Look inside a prediction: the preliminary (order-based) and
//! comprehensive (interval-aware) attention weights over a patient's
//! visits, and the gate that blends them.
//!
//!     cargo run --example attention_trace

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tham::cograph::build_acc;
use tham::cohort::{make_examples, Task};
use tham::config::{ModelConfig, SynthConfig};
use tham::model::{extend_features, history_rows, Tham};
use tham::synth;
use tham::tensor::Phase;
use tham::train::fit;

fn main() -> tham::Result<()> {
    let generated = synth::generate(&SynthConfig {
        n_patients: 60,
        n_codes: 16,
        n_drugs: 6,
        tree_depth: 2,
        branching: 4,
        n_clusters: 2,
        visits_min: 4,
        visits_max: 7,
        // mix short gaps with long ones so the time-aware path has
        // something to react to
        interval_profiles: vec![(14.0, 2.0), (160.0, 20.0)],
        ..Default::default()
    })?;
    let cohort = &generated.cohort;

    let mut cfg = ModelConfig::defaults(Task::Diagnosis);
    cfg.m_c = 4;
    cfg.m_d = 4;
    cfg.gnn_code_dims = vec![8, 12];
    cfg.gnn_drug_dims = vec![6, 6];
    cfg.a = 8;
    cfg.q = 8;
    cfg.b = 8;
    cfg.heads = 2;
    cfg.ffn_size = 24;
    cfg.tree_depth = 2;
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

    let (code_feats, _) = model.graph_features(Phase::Eval)?;
    let feats = extend_features(&code_feats)?;
    let mut rng = ChaCha20Rng::seed_from_u64(3);

    // pick the patient with the widest spread of gaps
    let patient = cohort
        .patients
        .iter()
        .max_by_key(|p| p.intervals.iter().max().unwrap() - p.intervals.iter().min().unwrap())
        .unwrap();
    let (probs, trace) = model.trace_patient(
        &feats,
        &history_rows(&patient.visits),
        &patient.intervals,
        &mut rng,
        Phase::Eval,
    )?;

    println!("{}: {} visits", patient.id, patient.visits.len());
    println!("{:>8} {:>7} {:>7} {:>7}", "gap", "alpha", "beta", "eta");
    let beta = trace.beta.as_ref();
    for (t, gap) in patient.intervals.iter().enumerate() {
        println!(
            "{:>7}d {:>7.3} {:>7} {:>7.3}",
            gap,
            trace.alpha[t],
            beta.map_or("-".into(), |b| format!("{:.3}", b[t])),
            trace.eta[t]
        );
    }
    if let Some((d1, d2)) = trace.delta {
        println!("gate delta = [{d1:.3}, {d2:.3}]  (order-based vs interval-aware)");
    }
    println!(
        "\nhighest next-visit probability: {:.3}",
        probs.values().iter().cloned().fold(f64::MIN, f64::max)
    );
    Ok(())
}
