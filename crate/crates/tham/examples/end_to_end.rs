//! The whole pipeline in one sitting: synthesize a cohort, train a
//! diagnosis-prediction model, score it on a held-out split, and predict
//! the next visit for one patient.
//!
//!     cargo run --example end_to_end

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tham::cograph::build_acc;
use tham::cohort::{make_examples, split, Target, Task};
use tham::config::{ModelConfig, SynthConfig};
use tham::metrics::recall_at_k;
use tham::model::{extend_features, history_rows, predict_topk, Tham};
use tham::synth;
use tham::tensor::Phase;
use tham::train::fit;

fn main() -> tham::Result<()> {
    let generated = synth::generate(&SynthConfig { n_patients: 300, ..Default::default() })?;
    let cohort = &generated.cohort;
    println!(
        "cohort: {} patients, {} codes, {} drugs",
        cohort.patients.len(),
        cohort.codes.len(),
        cohort.drugs.len()
    );

    // A small configuration keeps this example under a minute; the
    // defaults are sized for much larger cohorts.
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
    cfg.epochs = 10;
    cfg.lr = 1e-2;
    cfg.lr_milestones = vec![(8, 1e-3)];

    let examples = make_examples(cohort, Task::Diagnosis);
    let n = examples.len();
    let (train_ex, valid_ex, test_ex) =
        split(&examples, (n - n / 5 - n / 5, n / 5, n / 5), cfg.seed)?;

    // Graphs come from training patients only so the held-out splits
    // never leak co-occurrence statistics into the model.
    let train_ids: Vec<String> = train_ex.iter().map(|e| e.patient_id.clone()).collect();
    let graphs = build_acc(&cohort.restricted_to(&train_ids), cfg.lambda)?;

    let model = Tham::new(
        cfg.clone(),
        cohort.codes.clone(),
        cohort.drugs.clone(),
        Some(generated.tree.clone()),
        graphs,
    )?;
    let outcome = fit(&model, &train_ex, &valid_ex, |e| {
        println!(
            "epoch {:2}  train {:7.4}  valid {:7.4}  lr {}",
            e.epoch, e.train_loss, e.valid_loss, e.lr
        );
    })?;
    println!("best valid loss {:.4} at epoch {}", outcome.best_valid_loss, outcome.best_epoch);

    // Score recall@10 on the test split.
    let (code_feats, _) = model.graph_features(Phase::Eval)?;
    let feats = extend_features(&code_feats)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut pred = ndarray::Array2::zeros((test_ex.len(), cohort.codes.len()));
    let mut truth = Vec::new();
    for (i, ex) in test_ex.iter().enumerate() {
        let probs = model.forward_patient(
            &feats,
            &history_rows(&ex.history),
            &ex.intervals,
            &mut rng,
            Phase::Eval,
        )?;
        pred.row_mut(i).assign(&probs.values().row(0));
        if let Target::Codes(codes) = &ex.target {
            truth.push(codes.clone());
        }
    }
    let r10 = recall_at_k(&pred, &truth, 10)?;
    println!("test recall@10 = {:.3} over {} examples", r10.mean, r10.used);

    // Predict the visit after the last one we have for a single patient.
    let patient = &cohort.patients[0];
    let probs = model.forward_patient(
        &feats,
        &history_rows(&patient.visits),
        &patient.intervals,
        &mut rng,
        Phase::Eval,
    )?;
    println!("\ntop 5 next-visit codes for {}:", patient.id);
    for (code, p) in predict_topk(&probs, 5) {
        println!("  {:10} {:.3}", cohort.codes.name(code), p);
    }
    if let Some(expected) = generated.truth.expected_next.get(&patient.id) {
        println!("generator's own expectation: {}", expected.join(", "));
    }
    Ok(())
}
