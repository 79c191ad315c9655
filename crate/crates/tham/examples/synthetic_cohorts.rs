//! What the synthetic generator actually plants, and how to steer it.
//!
//! Patients are assigned to disease clusters. Each cluster walks a window
//! over its own codes from visit to visit, co-prescribes its own drugs,
//! and spaces visits by a cluster-specific interval profile, so a model
//! has real sequence, co-occurrence, and timing signal to find.
//!
//!     cargo run --example synthetic_cohorts

use tham::config::SynthConfig;
use tham::synth;

fn main() -> tham::Result<()> {
    let cfg = SynthConfig {
        n_patients: 12,
        n_codes: 24,
        n_drugs: 8,
        tree_depth: 2,
        branching: 5,
        n_clusters: 2,
        visits_min: 3,
        visits_max: 6,
        // one fast-relapse cluster, one slow
        interval_profiles: vec![(21.0, 3.0), (120.0, 14.0)],
        cooccur_rate: 0.8,
        seed: 7,
    };
    let generated = synth::generate(&cfg)?;
    let cohort = &generated.cohort;

    for patient in cohort.patients.iter().take(3) {
        let cluster = generated.truth.patient_clusters[&patient.id];
        println!("{} (cluster {cluster}):", patient.id);
        for (visit, gap) in patient.visits.iter().zip(&patient.intervals) {
            let codes: Vec<&str> =
                visit.codes.iter().map(|&c| cohort.codes.name(c)).collect();
            let drugs: Vec<&str> =
                visit.drugs.iter().map(|&d| cohort.drugs.name(d)).collect();
            println!("  +{gap:3}d  codes [{}]  drugs [{}]", codes.join(" "), drugs.join(" "));
        }
    }

    // The ground truth names every planted regularity, which is what the
    // learnability checks in the test suite key on.
    println!("\nplanted co-occurrence pairs (satellite rides along with primary):");
    for pair in generated.truth.planted_pairs.iter().take(5) {
        println!(
            "  {} -> {}  configured {:.2}, empirical {:.2}",
            pair.primary, pair.satellite, pair.configured_rate, pair.empirical_rate
        );
    }
    let c0 = generated.truth.code_clusters.values().filter(|&&c| c == 0).count();
    println!(
        "cluster 0 owns {c0} of {} codes; heart-failure style codes share the \"428\" prefix",
        cohort.codes.len()
    );

    // Everything serializes through the formats the command-line tools
    // read: cohort.jsonl, ontology.tsv, truth.json.
    let dir = tempfile::tempdir().map_err(tham::Error::from)?;
    tham::cohort::write_jsonl(cohort, dir.path().join("cohort.jsonl"))?;
    tham::ontology::write_edge_list(dir.path().join("ontology.tsv"), &generated.edges)?;
    println!("\nwrote cohort.jsonl and ontology.tsv under {}", dir.path().display());
    Ok(())
}
