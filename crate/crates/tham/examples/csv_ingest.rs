//! Load a cohort from MIMIC-style CSV extracts instead of the JSONL
//! format: an admissions table, a diagnoses table, and a prescriptions
//! table, joined on SUBJECT_ID and HADM_ID.
//!
//!     cargo run --example csv_ingest

use tham::cohort::{load_mimic_csv, make_examples, Target, Task};

fn main() -> tham::Result<()> {
    let dir = tempfile::tempdir().map_err(tham::Error::from)?;

    // Tiny hand-written extracts; timestamps keep whatever clock time the
    // source had, ingestion truncates to days.
    let admissions = "\
SUBJECT_ID,HADM_ID,ADMITTIME
17,101,2104-03-01 07:15:00
17,102,2104-05-20 19:02:00
17,103,2104-06-11 09:30:00
23,201,2110-01-05 00:45:00
23,202,2110-04-09 12:00:00
";
    let diagnoses = "\
SUBJECT_ID,HADM_ID,ICD9_CODE
17,101,4280
17,101,5849
17,102,4280
17,103,42822
23,201,25000
23,202,25000
23,202,3572
";
    let prescriptions = "\
SUBJECT_ID,HADM_ID,DRUG
17,101,furosemide
17,102,furosemide
17,102,lisinopril
23,201,metformin
";
    std::fs::write(dir.path().join("ADMISSIONS.csv"), admissions).map_err(tham::Error::from)?;
    std::fs::write(dir.path().join("DIAGNOSES_ICD.csv"), diagnoses).map_err(tham::Error::from)?;
    std::fs::write(dir.path().join("PRESCRIPTIONS.csv"), prescriptions)
        .map_err(tham::Error::from)?;

    let cohort = load_mimic_csv(
        dir.path().join("ADMISSIONS.csv"),
        dir.path().join("DIAGNOSES_ICD.csv"),
        dir.path().join("PRESCRIPTIONS.csv"),
    )?;
    println!(
        "{} patients, {} codes, {} drugs",
        cohort.patients.len(),
        cohort.codes.len(),
        cohort.drugs.len()
    );
    for p in &cohort.patients {
        println!("patient {}:", p.id);
        for (v, gap) in p.visits.iter().zip(&p.intervals) {
            let codes: Vec<&str> = v.codes.iter().map(|&c| cohort.codes.name(c)).collect();
            let drugs: Vec<&str> = v.drugs.iter().map(|&d| cohort.drugs.name(d)).collect();
            println!("  +{gap:3}d  [{}]  [{}]", codes.join(" "), drugs.join(" "));
        }
    }

    // ingested cohorts feed the same training entry points
    let examples = make_examples(&cohort, Task::HeartFailure);
    for ex in &examples {
        if let Target::Flag(flag) = ex.target {
            println!(
                "{}: {} history visits, heart-failure next visit = {flag}",
                ex.patient_id,
                ex.history.len()
            );
        }
    }
    Ok(())
}
