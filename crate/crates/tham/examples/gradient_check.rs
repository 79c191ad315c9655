//! Verify the reverse-mode gradients of the full training loss against
//! central finite differences. The same harness guards the test suite;
//! this shows how to point it at any loss you can close over.
//!
//!     cargo run --example gradient_check

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tham::cograph::build_acc;
use tham::cohort::{make_examples, Example, Task};
use tham::config::{ModelConfig, SynthConfig};
use tham::model::{bce, extend_features, Tham};
use tham::optim::{grad_check, GradCheckOptions};
use tham::synth;
use tham::tensor::Phase;

fn main() -> tham::Result<()> {
    let generated = synth::generate(&SynthConfig {
        n_patients: 3,
        n_codes: 12,
        n_drugs: 4,
        tree_depth: 2,
        branching: 4,
        n_clusters: 2,
        visits_min: 3,
        visits_max: 5,
        interval_profiles: vec![(20.0, 4.0), (45.0, 6.0)],
        ..Default::default()
    })?;
    let cohort = &generated.cohort;

    let mut cfg = ModelConfig::defaults(Task::Diagnosis);
    cfg.m_c = 3;
    cfg.m_d = 4;
    cfg.gnn_code_dims = vec![6, 8];
    cfg.gnn_drug_dims = vec![4, 4];
    cfg.a = 4;
    cfg.q = 4;
    cfg.b = 4;
    cfg.heads = 2;
    cfg.ffn_size = 12;
    cfg.tree_depth = 2;

    let model = Tham::new(
        cfg,
        cohort.codes.clone(),
        cohort.drugs.clone(),
        Some(generated.tree.clone()),
        build_acc(cohort, 0.01)?,
    )?;
    let examples = make_examples(cohort, Task::Diagnosis);
    let refs: Vec<&Example> = examples.iter().collect();
    let target = model.target_matrix(&refs)?;

    // The loss closure must be deterministic, hence Phase::Frozen: eval
    // math, but gradients still recorded.
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let opts = GradCheckOptions { sample_cap: 50, ..Default::default() };
    let report = grad_check(
        || {
            let (code_feats, _) = model.graph_features(Phase::Frozen)?;
            let feats = extend_features(&code_feats)?;
            let pred = model.forward_examples(&feats, &refs, &mut rng, Phase::Frozen)?;
            bce(&pred, &target)
        },
        &model.params,
        &opts,
    )?;

    println!(
        "{} parameter tensors, {} sampled entries",
        report.per_param.len(),
        report.total_entries
    );
    let mut worst: Vec<&tham::optim::ParamCheck> = report.per_param.iter().collect();
    worst.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    for check in worst.iter().take(5) {
        println!("  {:24} max rel err {:.3e}", check.name, check.max_rel_err);
    }
    println!(
        "\noverall max rel err {:.3e} (tolerance {:.0e}) -> {}",
        report.max_rel_err,
        report.tol,
        if report.passed() { "gradients agree" } else { "MISMATCH" }
    );
    Ok(())
}
