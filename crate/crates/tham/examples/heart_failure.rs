//! The binary task: will any "428"-prefixed code appear in the patient's
//! next visit? Same encoder, a one-output head, AUC and F1 instead of
//! recall@k.
//!
//!     cargo run --example heart_failure

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tham::cograph::build_acc;
use tham::cohort::{make_examples, split, Target, Task};
use tham::config::{ModelConfig, SynthConfig};
use tham::metrics::{auc, binary_f1};
use tham::model::{extend_features, history_rows, Tham};
use tham::synth;
use tham::tensor::Phase;
use tham::train::fit;

fn main() -> tham::Result<()> {
    let generated = synth::generate(&SynthConfig { n_patients: 400, ..Default::default() })?;
    let cohort = &generated.cohort;

    // Heart-failure defaults are already small; shrink epochs for a demo.
    let mut cfg = ModelConfig::defaults(Task::HeartFailure);
    cfg.tree_depth = 3;
    cfg.epochs = 6;

    let examples = make_examples(cohort, Task::HeartFailure);
    let positives = examples
        .iter()
        .filter(|e| matches!(e.target, Target::Flag(true)))
        .count();
    println!("{} examples, {positives} positive", examples.len());

    let n = examples.len();
    let (train_ex, valid_ex, test_ex) =
        split(&examples, (n - n / 5 - n / 5, n / 5, n / 5), cfg.seed)?;
    let train_ids: Vec<String> = train_ex.iter().map(|e| e.patient_id.clone()).collect();
    let model = Tham::new(
        cfg.clone(),
        cohort.codes.clone(),
        cohort.drugs.clone(),
        Some(generated.tree.clone()),
        build_acc(&cohort.restricted_to(&train_ids), cfg.lambda)?,
    )?;
    let outcome = fit(&model, &train_ex, &valid_ex, |e| {
        println!("epoch {}  train {:.4}  valid {:.4}", e.epoch, e.train_loss, e.valid_loss);
    })?;
    println!("best valid loss {:.4}", outcome.best_valid_loss);

    let (code_feats, _) = model.graph_features(Phase::Eval)?;
    let feats = extend_features(&code_feats)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for ex in &test_ex {
        let probs = model.forward_patient(
            &feats,
            &history_rows(&ex.history),
            &ex.intervals,
            &mut rng,
            Phase::Eval,
        )?;
        scores.push(probs.item());
        if let Target::Flag(flag) = ex.target {
            labels.push(flag);
        }
    }
    println!("test AUC {:.3}", auc(&scores, &labels)?);
    println!("test F1  {:.3} at threshold 0.5", binary_f1(&scores, &labels, 0.5));
    Ok(())
}
