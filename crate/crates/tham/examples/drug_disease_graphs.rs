//! The two co-occurrence graphs behind the heterogeneous message passing:
//! a drug-to-code matrix counting same-visit prescriptions, and a
//! code-to-code matrix thresholded so rare coincidences don't become
//! edges.
//!
//!     cargo run --example drug_disease_graphs

use tham::cograph::{build_acc, build_bdc};
use tham::config::SynthConfig;
use tham::synth;

fn main() -> tham::Result<()> {
    let generated = synth::generate(&SynthConfig {
        n_patients: 80,
        n_codes: 12,
        n_drugs: 4,
        tree_depth: 2,
        branching: 4,
        n_clusters: 2,
        interval_profiles: vec![(30.0, 5.0), (90.0, 10.0)],
        ..Default::default()
    })?;
    let cohort = &generated.cohort;

    let b_dc = build_bdc(cohort);
    println!("B_DC is {} drugs x {} codes, rows normalized to 1 (or all-zero):", b_dc.nrows(), b_dc.ncols());
    for (d, row) in b_dc.outer_iter().enumerate().take(3) {
        let top: Vec<String> = {
            let mut ranked: Vec<(usize, f64)> =
                row.iter().copied().enumerate().filter(|&(_, v)| v > 0.0).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            ranked
                .iter()
                .take(3)
                .map(|&(c, v)| format!("{} {:.2}", cohort.codes.name(c as u32), v))
                .collect()
        };
        println!("  {}: {}", cohort.drugs.name(d as u32), top.join(", "));
    }

    // The threshold lambda is a fraction of each row's co-occurrence
    // mass. Raising it prunes weak edges and renormalizes the survivors.
    for lambda in [0.01, 0.15, 0.30] {
        let graphs = build_acc(cohort, lambda)?;
        let edges = graphs.a_cc.iter().filter(|&&v| v > 0.0).count();
        let row0_sum: f64 = graphs.a_cc.row(0).sum();
        println!(
            "lambda {lambda:4}: {edges:3} code-code edges, row 0 sums to {row0_sum:.12}"
        );
    }

    // counts_cc keeps the raw tallies so the normalized matrix can always
    // be audited against them.
    let graphs = build_acc(cohort, 0.01)?;
    let (i, j, n) = graphs
        .counts_cc
        .indexed_iter()
        .max_by_key(|&(_, &n)| n)
        .map(|((i, j), &n)| (i, j, n))
        .unwrap();
    println!(
        "most frequent pair: {} with {} ({n} shared visits)",
        cohort.codes.name(i as u32),
        cohort.codes.name(j as u32)
    );
    Ok(())
}
