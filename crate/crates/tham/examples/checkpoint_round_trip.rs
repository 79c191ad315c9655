//! Save a trained model, load it back, and confirm the reload serves the
//! exact probabilities the original produced, bit for bit. The file also
//! carries the eval-mode code/drug features so downstream consumers never
//! need the training graphs.
//!
//!     cargo run --example checkpoint_round_trip

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tham::checkpoint;
use tham::cograph::build_acc;
use tham::cohort::{make_examples, Task};
use tham::config::{ModelConfig, SynthConfig};
use tham::model::{extend_features, history_rows, Tham};
use tham::synth;
use tham::tensor::{Phase, Tensor};
use tham::train::fit;

fn main() -> tham::Result<()> {
    let generated = synth::generate(&SynthConfig {
        n_patients: 40,
        n_codes: 16,
        n_drugs: 6,
        tree_depth: 2,
        branching: 4,
        n_clusters: 2,
        interval_profiles: vec![(30.0, 5.0), (90.0, 10.0)],
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
    cfg.epochs = 3;
    cfg.lr = 1e-2;
    cfg.lr_milestones = vec![];

    let examples = make_examples(cohort, Task::Diagnosis);
    let model = Tham::new(
        cfg,
        cohort.codes.clone(),
        cohort.drugs.clone(),
        Some(generated.tree.clone()),
        build_acc(cohort, 0.01)?,
    )?;
    let outcome = fit(&model, &examples, &examples, |_| {})?;

    let dir = tempfile::tempdir().map_err(tham::Error::from)?;
    let path = dir.path().join("model.tham");
    checkpoint::save(&model, outcome.best_valid_loss, None, &path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let loaded = checkpoint::load(&path)?;
    println!(
        "loaded: task {}, best valid loss {:.4}, {} parameter tensors",
        loaded.model.config.task.as_str(),
        loaded.best_valid_loss,
        loaded.model.params.len()
    );

    // same patient through both models, compared exactly
    let patient = &cohort.patients[0];
    let serve = |m: &Tham, feats: &Tensor| -> tham::Result<Vec<f64>> {
        let extended = extend_features(feats)?;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let probs = m.forward_patient(
            &extended,
            &history_rows(&patient.visits),
            &patient.intervals,
            &mut rng,
            Phase::Eval,
        )?;
        let row: Vec<f64> = probs.values().iter().copied().collect();
        Ok(row)
    };
    let (code_feats, _) = model.graph_features(Phase::Eval)?;
    let before = serve(&model, &code_feats)?;
    let after = serve(&loaded.model, &Tensor::constant(loaded.code_features.clone()))?;

    let same = before
        .iter()
        .zip(&after)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!(
        "{} probabilities compared: {}",
        before.len(),
        if same { "bit-identical" } else { "DIFFER" }
    );
    Ok(())
}
