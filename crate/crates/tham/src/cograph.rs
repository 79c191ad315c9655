//! Co-occurrence graphs over the training split: the drug-code incidence
//! matrix and the thresholded, row-renormalized code-code influence
//! matrix. Counting is per visit; both matrices are plain (non-trainable)
//! inputs to the graph network.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::cohort::Cohort;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CoGraphs {
    /// |D| x |C|; each nonzero row sums to 1.
    pub b_dc: Array2<f64>,
    /// |C| x |C|; zero diagonal; each nonzero row sums to 1; asymmetric.
    pub a_cc: Array2<f64>,
    /// Visit-level co-occurrence counts behind `a_cc` (diagonal unused).
    pub counts_cc: Array2<u64>,
    pub lambda: f64,
}

/// Count drug-code co-occurrences per visit and row-normalize per drug.
/// Drugs never seen with any code keep an all-zero row.
pub fn build_bdc(cohort: &Cohort) -> Array2<f64> {
    let mut raw = Array2::<f64>::zeros((cohort.drugs.len(), cohort.codes.len()));
    for p in &cohort.patients {
        for v in &p.visits {
            for &d in &v.drugs {
                for &c in &v.codes {
                    raw[(d as usize, c as usize)] += 1.0;
                }
            }
        }
    }
    for mut row in raw.rows_mut() {
        let sum: f64 = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|x| x / sum);
        }
    }
    raw
}

fn count_cc(cohort: &Cohort) -> Array2<u64> {
    let n = cohort.codes.len();
    let mut counts = Array2::<u64>::zeros((n, n));
    for p in &cohort.patients {
        for v in &p.visits {
            for &ci in &v.codes {
                for &cj in &v.codes {
                    if ci != cj {
                        counts[(ci as usize, cj as usize)] += 1;
                    }
                }
            }
        }
    }
    counts
}

/// Per row i: keep neighbors whose share of row i's total count reaches
/// `lambda`, then renormalize over the kept set. Rows with nothing kept
/// (including codes never co-occurring at all) stay zero.
pub fn build_acc(cohort: &Cohort, lambda: f64) -> Result<CoGraphs> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda = {lambda} must be in [0, 1]")));
    }
    let counts = count_cc(cohort);
    let n = counts.nrows();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let total: u64 = counts.row(i).sum();
        if total == 0 {
            continue;
        }
        let kept: Vec<usize> = (0..n)
            .filter(|&j| j != i && counts[(i, j)] as f64 / total as f64 >= lambda)
            .collect();
        let kept_total: u64 = kept.iter().map(|&j| counts[(i, j)]).sum();
        if kept_total == 0 {
            continue;
        }
        for &j in &kept {
            a[(i, j)] = counts[(i, j)] as f64 / kept_total as f64;
        }
    }
    Ok(CoGraphs {
        b_dc: build_bdc(cohort),
        a_cc: a,
        counts_cc: counts,
        lambda,
    })
}

/// Coordinate-format dump (`row col value` per line, nonzero entries in
/// row-major order) for inspection.
pub fn dump_matrix(m: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ((r, c), &v) in m.indexed_iter() {
        if v != 0.0 {
            writeln!(w, "{r} {c} {v}")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Patient, Visit, Vocab};

    /// Cohort from visit lists given as (codes, drugs) index tuples.
    fn cohort_of(n_codes: usize, n_drugs: usize, visits: &[(&[u32], &[u32])]) -> Cohort {
        let codes = Vocab::from_names(&(0..n_codes).map(|i| format!("c{i}")).collect::<Vec<_>>());
        let drugs = Vocab::from_names(&(0..n_drugs).map(|i| format!("d{i}")).collect::<Vec<_>>());
        let visits: Vec<Visit> = visits
            .iter()
            .enumerate()
            .map(|(t, (cs, ds))| Visit {
                admit_day: t as i64 * 10,
                codes: cs.to_vec(),
                drugs: ds.to_vec(),
            })
            .collect();
        let intervals = visits
            .iter()
            .enumerate()
            .map(|(t, v)| if t == 0 { 0 } else { v.admit_day - visits[t - 1].admit_day })
            .collect();
        Cohort {
            patients: vec![Patient { id: "p".into(), visits, intervals }],
            codes,
            drugs,
        }
    }

    #[test]
    fn drug_rows_count_then_normalize() {
        let cohort = cohort_of(2, 1, &[(&[0, 1], &[0]), (&[0, 1], &[0])]);
        let b = build_bdc(&cohort);
        assert_eq!(b.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn single_pairing_gives_unit_weight() {
        let cohort = cohort_of(2, 2, &[(&[1], &[1])]);
        let b = build_bdc(&cohort);
        assert_eq!(b[(1, 1)], 1.0);
        assert_eq!(b.row(0).sum(), 0.0);
    }

    #[test]
    fn unused_drug_row_stays_zero() {
        let cohort = cohort_of(2, 2, &[(&[0], &[0])]);
        let b = build_bdc(&cohort);
        assert!(b.row(1).iter().all(|&x| x == 0.0));
    }

    /// Counts e_ij are visit-level: code 0 meets code 1 in three visits
    /// and code 2 in one.
    fn skewed_cohort() -> Cohort {
        cohort_of(
            3,
            1,
            &[(&[0, 1], &[]), (&[0, 1], &[]), (&[0, 1], &[]), (&[0, 2], &[])],
        )
    }

    #[test]
    fn low_threshold_keeps_both_neighbors() {
        let g = build_acc(&skewed_cohort(), 0.2).unwrap();
        assert_eq!(g.a_cc[(0, 1)], 0.75);
        assert_eq!(g.a_cc[(0, 2)], 0.25);
    }

    #[test]
    fn higher_threshold_drops_the_weak_neighbor_and_renormalizes() {
        let g = build_acc(&skewed_cohort(), 0.3).unwrap();
        assert_eq!(g.a_cc[(0, 1)], 1.0);
        assert_eq!(g.a_cc[(0, 2)], 0.0);
    }

    #[test]
    fn influence_is_asymmetric() {
        let g = build_acc(&skewed_cohort(), 0.2).unwrap();
        // code 1 only ever co-occurs with code 0
        assert_eq!(g.a_cc[(1, 0)], 1.0);
        assert_eq!(g.a_cc[(0, 1)], 0.75);
    }

    #[test]
    fn diagonal_is_zero_and_nonzero_rows_sum_to_one() {
        let g = build_acc(&skewed_cohort(), 0.1).unwrap();
        for i in 0..3 {
            assert_eq!(g.a_cc[(i, i)], 0.0);
            let s: f64 = g.a_cc.row(i).sum();
            if s != 0.0 {
                assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
            }
        }
    }

    #[test]
    fn raising_lambda_never_adds_entries() {
        let lo = build_acc(&skewed_cohort(), 0.1).unwrap();
        let hi = build_acc(&skewed_cohort(), 0.4).unwrap();
        for ((i, j), &v) in hi.a_cc.indexed_iter() {
            if v != 0.0 {
                assert!(lo.a_cc[(i, j)] != 0.0, "entry ({i},{j}) appeared at higher lambda");
            }
        }
    }

    #[test]
    fn isolated_code_keeps_a_zero_row() {
        // single-code visits never co-occur with anything
        let cohort = cohort_of(2, 1, &[(&[0], &[]), (&[1], &[])]);
        let g = build_acc(&cohort, 0.01).unwrap();
        assert!(g.a_cc.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dump_format_is_row_col_value() {
        let cohort = cohort_of(2, 1, &[(&[0, 1], &[0])]);
        let g = build_acc(&cohort, 0.01).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        dump_matrix(&g.a_cc, f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(text, "0 1 1\n1 0 1\n");
    }
}
