//! EHR-style data model: patients, visits, vocabularies, ingestion from
//! JSONL and MIMIC-style CSV files, label derivation, and splitting.
//!
//! Conventions fixed here and relied on everywhere else:
//! - time is measured in integer days; `intervals[0] = 0` and
//!   `intervals[t] = admit_day[t] - admit_day[t-1]`;
//! - same-day duplicate admissions of one patient are merged (union of
//!   codes and drugs) since a zero-day self-transition carries no sequence
//!   information;
//! - vocabularies index identifiers in first-appearance order over the
//!   canonical (sorted, merged) visit order, so serialize/reload round-trips
//!   preserve every index.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier-to-index map preserving first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: &[String]) -> Self {
        let mut v = Vocab::new();
        for n in names {
            v.get_or_insert(n);
        }
        v
    }

    pub fn get_or_insert(&mut self, name: &str) -> u32 {
        match self.index.entry(name.to_string()) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => {
                let id = self.names.len() as u32;
                self.names.push(name.to_string());
                e.insert(id);
                id
            }
        }
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub admit_day: i64,
    /// Code ids, first-appearance order within the visit, no duplicates.
    pub codes: Vec<u32>,
    /// Drug ids; may be empty.
    pub drugs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub visits: Vec<Visit>,
    /// `intervals[0] = 0`, `intervals[t] = admit_day[t] - admit_day[t-1]`.
    pub intervals: Vec<i64>,
}

#[derive(Debug, Clone, Default)]
pub struct Cohort {
    pub patients: Vec<Patient>,
    pub codes: Vocab,
    pub drugs: Vocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Diagnosis,
    HeartFailure,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Diagnosis => "diagnosis",
            Task::HeartFailure => "heart_failure",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "diagnosis" => Ok(Task::Diagnosis),
            "heart_failure" => Ok(Task::HeartFailure),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected diagnosis or heart_failure)"
            ))),
        }
    }
}

/// Prediction target of one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Code ids of the held-out next visit.
    Codes(Vec<u32>),
    /// Whether the held-out next visit contains a heart-failure code.
    Flag(bool),
}

#[derive(Debug, Clone)]
pub struct Example {
    pub patient_id: String,
    pub history: Vec<Visit>,
    /// Intervals aligned with `history` (first entry 0).
    pub intervals: Vec<i64>,
    pub target: Target,
}

pub const HEART_FAILURE_PREFIX: &str = "428";

// ---- JSONL ingestion ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPatient {
    patient_id: String,
    visits: Vec<RawVisit>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVisit {
    #[serde(default)]
    admit_day: Option<i64>,
    #[serde(default)]
    admit_time: Option<String>,
    codes: Vec<String>,
    #[serde(default)]
    drugs: Vec<String>,
}

#[derive(Serialize)]
struct OutPatient<'a> {
    patient_id: &'a str,
    visits: Vec<OutVisit<'a>>,
}

#[derive(Serialize)]
struct OutVisit<'a> {
    admit_day: i64,
    codes: Vec<&'a str>,
    drugs: Vec<&'a str>,
}

fn parse_admit_day(path: &str, line: usize, v: &RawVisit) -> Result<i64> {
    match (v.admit_day, v.admit_time.as_deref()) {
        (Some(d), None) => Ok(d),
        (None, Some(s)) => {
            let date = NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| {
                Error::parse(path, line, format!("bad admit_time {s:?}: {e}"))
            })?;
            Ok(date
                .signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).unwrap())
                .num_days())
        }
        (Some(_), Some(_)) => Err(Error::parse(
            path,
            line,
            "visit has both admit_day and admit_time",
        )),
        (None, None) => Err(Error::parse(
            path,
            line,
            "visit needs admit_day or admit_time",
        )),
    }
}

/// Sort one patient's visits by admit day, merge same-day duplicates
/// (union of codes and drugs), and drop duplicate identifiers within a
/// visit. Identifier order stays first-appearance.
fn canonicalize_visits(
    patient_id: &str,
    mut visits: Vec<(i64, Vec<String>, Vec<String>)>,
) -> Vec<(i64, Vec<String>, Vec<String>)> {
    visits.sort_by_key(|(day, _, _)| *day);
    let mut out: Vec<(i64, Vec<String>, Vec<String>)> = Vec::with_capacity(visits.len());
    for (day, codes, drugs) in visits {
        if let Some(last) = out.last_mut() {
            if last.0 == day {
                log::warn!("patient {patient_id}: merging duplicate admission on day {day}");
                for c in codes {
                    if !last.1.contains(&c) {
                        last.1.push(c);
                    }
                }
                for d in drugs {
                    if !last.2.contains(&d) {
                        last.2.push(d);
                    }
                }
                continue;
            }
        }
        let mut cdedup: Vec<String> = Vec::with_capacity(codes.len());
        for c in codes {
            if cdedup.contains(&c) {
                log::warn!("patient {patient_id}: dropping duplicate code {c} within a visit");
            } else {
                cdedup.push(c);
            }
        }
        let mut ddedup: Vec<String> = Vec::with_capacity(drugs.len());
        for d in drugs {
            if !ddedup.contains(&d) {
                ddedup.push(d);
            }
        }
        out.push((day, cdedup, ddedup));
    }
    out
}

fn intervals_of(visits: &[Visit]) -> Vec<i64> {
    let mut intervals = Vec::with_capacity(visits.len());
    for (t, v) in visits.iter().enumerate() {
        if t == 0 {
            intervals.push(0);
        } else {
            intervals.push(v.admit_day - visits[t - 1].admit_day);
        }
    }
    intervals
}

/// Assemble a cohort from canonicalized string-form patients, building
/// vocabularies in first-appearance order.
fn assemble(patients: Vec<(String, Vec<(i64, Vec<String>, Vec<String>)>)>) -> Cohort {
    let mut cohort = Cohort::default();
    for (id, visits) in patients {
        let visits: Vec<Visit> = visits
            .into_iter()
            .map(|(day, codes, drugs)| Visit {
                admit_day: day,
                codes: codes
                    .iter()
                    .map(|c| cohort.codes.get_or_insert(c))
                    .collect(),
                drugs: drugs
                    .iter()
                    .map(|d| cohort.drugs.get_or_insert(d))
                    .collect(),
            })
            .collect();
        let intervals = intervals_of(&visits);
        cohort.patients.push(Patient { id, visits, intervals });
    }
    cohort
}

/// Load a cohort from JSONL (one patient object per line).
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path)?;
    let reader = BufReader::new(file);

    let mut seen_ids: HashMap<String, usize> = HashMap::new();
    let mut patients = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPatient = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&shown, lineno, e.to_string()))?;
        if let Some(prev) = seen_ids.insert(raw.patient_id.clone(), lineno) {
            return Err(Error::parse(
                &shown,
                lineno,
                format!("duplicate patient_id {:?} (first seen on line {prev})", raw.patient_id),
            ));
        }
        let mut visits = Vec::with_capacity(raw.visits.len());
        for v in &raw.visits {
            if v.codes.is_empty() {
                return Err(Error::parse(
                    &shown,
                    lineno,
                    format!("patient {:?} has a visit with no codes", raw.patient_id),
                ));
            }
            let day = parse_admit_day(&shown, lineno, v)?;
            visits.push((day, v.codes.clone(), v.drugs.clone()));
        }
        let visits = canonicalize_visits(&raw.patient_id, visits);
        patients.push((raw.patient_id, visits));
    }
    Ok(assemble(patients))
}

/// Write a cohort in the same JSONL schema `load_jsonl` reads
/// (canonical form: integer admit days).
pub fn write_jsonl(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &cohort.patients {
        let out = OutPatient {
            patient_id: &p.id,
            visits: p
                .visits
                .iter()
                .map(|v| OutVisit {
                    admit_day: v.admit_day,
                    codes: v.codes.iter().map(|&c| cohort.codes.name(c)).collect(),
                    drugs: v.drugs.iter().map(|&d| cohort.drugs.name(d)).collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &out).map_err(|e| Error::Numeric(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One patient in name form (no vocabulary interning), for scoring a
/// record against an already-trained model's vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedPatient {
    pub id: String,
    /// Canonical visit order: (admit day, code names, drug names).
    pub visits: Vec<(i64, Vec<String>, Vec<String>)>,
    /// Same convention as [`Patient::intervals`].
    pub intervals: Vec<i64>,
}

/// Parse one cohort.jsonl line without building vocabularies.
pub fn parse_patient_line(line: &str) -> Result<NamedPatient> {
    const SOURCE: &str = "<patient>";
    let raw: RawPatient =
        serde_json::from_str(line).map_err(|e| Error::parse(SOURCE, 1, e.to_string()))?;
    let mut visits = Vec::with_capacity(raw.visits.len());
    for v in &raw.visits {
        if v.codes.is_empty() {
            return Err(Error::parse(
                SOURCE,
                1,
                format!("patient {:?} has a visit with no codes", raw.patient_id),
            ));
        }
        let day = parse_admit_day(SOURCE, 1, v)?;
        visits.push((day, v.codes.clone(), v.drugs.clone()));
    }
    let visits = canonicalize_visits(&raw.patient_id, visits);
    if visits.is_empty() {
        return Err(Error::parse(
            SOURCE,
            1,
            format!("patient {:?} has no visits", raw.patient_id),
        ));
    }
    let mut intervals = Vec::with_capacity(visits.len());
    for (t, (day, _, _)) in visits.iter().enumerate() {
        intervals.push(if t == 0 { 0 } else { day - visits[t - 1].0 });
    }
    Ok(NamedPatient { id: raw.patient_id, visits, intervals })
}

// ---- MIMIC-style CSV ingestion ----

fn column_index(headers: &csv::StringRecord, name: &str, path: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::parse(path, 1, format!("missing column {name}")))
}

fn parse_mimic_day(raw: &str, path: &str, line: usize) -> Result<i64> {
    // ADMITTIME is "YYYY-MM-DD" optionally followed by a clock time;
    // truncate to day resolution.
    let head = raw.get(..10).unwrap_or(raw);
    let date = NaiveDate::parse_from_str(head, "%Y-%m-%d")
        .map_err(|e| Error::parse(path, line, format!("bad ADMITTIME {raw:?}: {e}")))?;
    Ok(date
        .signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).unwrap())
        .num_days())
}

/// Load a cohort from MIMIC-style CSV extracts: admissions
/// (SUBJECT_ID, HADM_ID, ADMITTIME), diagnoses (SUBJECT_ID, HADM_ID,
/// ICD9_CODE), prescriptions (SUBJECT_ID, HADM_ID, DRUG).
///
/// Admissions without any diagnosis row are dropped, then patients with
/// fewer than two remaining visits are dropped.
pub fn load_mimic_csv(
    admissions: impl AsRef<Path>,
    diagnoses: impl AsRef<Path>,
    prescriptions: impl AsRef<Path>,
) -> Result<Cohort> {
    let adm_path = admissions.as_ref().display().to_string();
    let dx_path = diagnoses.as_ref().display().to_string();
    let rx_path = prescriptions.as_ref().display().to_string();

    let mut rdr = csv::Reader::from_path(admissions.as_ref())?;
    let headers = rdr.headers().map_err(|e| Error::parse(&adm_path, 1, e.to_string()))?.clone();
    let subj_i = column_index(&headers, "SUBJECT_ID", &adm_path)?;
    let hadm_i = column_index(&headers, "HADM_ID", &adm_path)?;
    let time_i = column_index(&headers, "ADMITTIME", &adm_path)?;
    // subject order and per-subject admission list, both in file order
    let mut subject_order: Vec<String> = Vec::new();
    let mut admissions_of: HashMap<String, Vec<(String, i64)>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(&adm_path, line, e.to_string()))?;
        let subject = rec.get(subj_i).unwrap_or("").to_string();
        let hadm = rec.get(hadm_i).unwrap_or("").to_string();
        if subject.is_empty() || hadm.is_empty() {
            return Err(Error::parse(&adm_path, line, "empty SUBJECT_ID or HADM_ID"));
        }
        let day = parse_mimic_day(rec.get(time_i).unwrap_or(""), &adm_path, line)?;
        match admissions_of.entry(subject.clone()) {
            Entry::Occupied(mut e) => e.get_mut().push((hadm, day)),
            Entry::Vacant(e) => {
                subject_order.push(subject);
                e.insert(vec![(hadm, day)]);
            }
        }
    }

    let mut rdr = csv::Reader::from_path(diagnoses.as_ref())?;
    let headers = rdr.headers().map_err(|e| Error::parse(&dx_path, 1, e.to_string()))?.clone();
    let hadm_i = column_index(&headers, "HADM_ID", &dx_path)?;
    column_index(&headers, "SUBJECT_ID", &dx_path)?;
    let code_i = column_index(&headers, "ICD9_CODE", &dx_path)?;
    let mut codes_of: HashMap<String, Vec<String>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(&dx_path, line, e.to_string()))?;
        let code = rec.get(code_i).unwrap_or("");
        if code.is_empty() {
            continue;
        }
        codes_of
            .entry(rec.get(hadm_i).unwrap_or("").to_string())
            .or_default()
            .push(code.to_string());
    }

    let mut rdr = csv::Reader::from_path(prescriptions.as_ref())?;
    let headers = rdr.headers().map_err(|e| Error::parse(&rx_path, 1, e.to_string()))?.clone();
    let hadm_i = column_index(&headers, "HADM_ID", &rx_path)?;
    column_index(&headers, "SUBJECT_ID", &rx_path)?;
    let drug_i = column_index(&headers, "DRUG", &rx_path)?;
    let mut drugs_of: HashMap<String, Vec<String>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(&rx_path, line, e.to_string()))?;
        let drug = rec.get(drug_i).unwrap_or("");
        if drug.is_empty() {
            continue;
        }
        drugs_of
            .entry(rec.get(hadm_i).unwrap_or("").to_string())
            .or_default()
            .push(drug.to_string());
    }

    let mut patients = Vec::new();
    for subject in subject_order {
        let mut visits = Vec::new();
        for (hadm, day) in &admissions_of[&subject] {
            let codes = match codes_of.get(hadm) {
                Some(c) if !c.is_empty() => c.clone(),
                _ => continue, // admission without diagnoses carries no label signal
            };
            let drugs = drugs_of.get(hadm).cloned().unwrap_or_default();
            visits.push((*day, codes, drugs));
        }
        let visits = canonicalize_visits(&subject, visits);
        if visits.len() >= 2 {
            patients.push((subject, visits));
        }
    }
    Ok(assemble(patients))
}

// ---- examples and splitting ----

/// One example per patient with at least two visits: the last visit
/// becomes the prediction target, everything before it the history.
pub fn make_examples(cohort: &Cohort, task: Task) -> Vec<Example> {
    let mut out = Vec::new();
    for p in &cohort.patients {
        if p.visits.len() < 2 {
            continue;
        }
        let t = p.visits.len() - 1;
        let last = &p.visits[t];
        let target = match task {
            Task::Diagnosis => Target::Codes(last.codes.clone()),
            Task::HeartFailure => Target::Flag(
                last.codes
                    .iter()
                    .any(|&c| cohort.codes.name(c).starts_with(HEART_FAILURE_PREFIX)),
            ),
        };
        out.push(Example {
            patient_id: p.id.clone(),
            history: p.visits[..t].to_vec(),
            intervals: p.intervals[..t].to_vec(),
            target,
        });
    }
    out
}

/// Deterministic shuffle under `seed`, then disjoint partitions of the
/// exact requested sizes.
pub fn split(
    examples: &[Example],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    let (n_train, n_valid, n_test) = counts;
    let need = n_train + n_valid + n_test;
    if need > examples.len() {
        return Err(Error::Config(format!(
            "split needs {need} examples but only {} are available (short by {})",
            examples.len(),
            need - examples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let train = idx[..n_train].iter().map(|&i| examples[i].clone()).collect();
    let valid = idx[n_train..n_train + n_valid]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    let test = idx[n_train + n_valid..need]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    Ok((train, valid, test))
}

impl Cohort {
    /// Clone of this cohort restricted to the named patients (used to
    /// build co-occurrence graphs from the training split only).
    /// Vocabularies are shared so indices stay stable.
    pub fn restricted_to(&self, patient_ids: &[String]) -> Cohort {
        let wanted: std::collections::HashSet<&str> =
            patient_ids.iter().map(|s| s.as_str()).collect();
        Cohort {
            patients: self
                .patients
                .iter()
                .filter(|p| wanted.contains(p.id.as_str()))
                .cloned()
                .collect(),
            codes: self.codes.clone(),
            drugs: self.drugs.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn intervals_start_at_zero_and_follow_day_differences() {
        let f = write_temp(
            r#"{"patient_id": "p1", "visits": [{"admit_day": 0, "codes": ["a"], "drugs": []}, {"admit_day": 60, "codes": ["b"], "drugs": []}]}"#,
        );
        let cohort = load_jsonl(f.path()).unwrap();
        assert_eq!(cohort.patients[0].intervals, vec![0, 60]);
    }

    #[test]
    fn admit_time_dates_become_day_indices() {
        let f = write_temp(
            r#"{"patient_id": "p1", "visits": [{"admit_time": "2010-01-01", "codes": ["a"]}, {"admit_time": "2010-03-02", "codes": ["b"]}]}"#,
        );
        let cohort = load_jsonl(f.path()).unwrap();
        assert_eq!(cohort.patients[0].intervals, vec![0, 60]);
    }

    #[test]
    fn shared_codes_dedupe_in_the_vocabulary() {
        let f = write_temp(concat!(
            r#"{"patient_id": "p1", "visits": [{"admit_day": 0, "codes": ["4280"], "drugs": []}, {"admit_day": 1, "codes": ["4280"], "drugs": []}]}"#,
            "\n",
            r#"{"patient_id": "p2", "visits": [{"admit_day": 0, "codes": ["4280", "x"], "drugs": []}, {"admit_day": 2, "codes": ["x"], "drugs": []}]}"#,
        ));
        let cohort = load_jsonl(f.path()).unwrap();
        assert_eq!(cohort.codes.len(), 2);
        assert_eq!(cohort.codes.id("4280"), Some(0));
        assert_eq!(cohort.codes.id("x"), Some(1));
    }

    #[test]
    fn malformed_line_reports_its_line_number() {
        let f = write_temp("{\"patient_id\": \"p1\", \"visits\": []}\nnot json\n");
        match load_jsonl(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn same_day_admissions_merge_into_one_visit() {
        let f = write_temp(
            r#"{"patient_id": "p1", "visits": [{"admit_day": 5, "codes": ["a", "b"], "drugs": ["d1"]}, {"admit_day": 5, "codes": ["b", "c"], "drugs": ["d2"]}, {"admit_day": 1, "codes": ["z"], "drugs": []}]}"#,
        );
        let cohort = load_jsonl(f.path()).unwrap();
        let p = &cohort.patients[0];
        assert_eq!(p.visits.len(), 2);
        assert_eq!(p.visits[0].admit_day, 1);
        let merged: Vec<&str> = p.visits[1].codes.iter().map(|&c| cohort.codes.name(c)).collect();
        assert_eq!(merged, vec!["a", "b", "c"]);
        let drugs: Vec<&str> = p.visits[1].drugs.iter().map(|&d| cohort.drugs.name(d)).collect();
        assert_eq!(drugs, vec!["d1", "d2"]);
    }

    #[test]
    fn jsonl_round_trip_preserves_cohort_and_vocab_order() {
        let f = write_temp(concat!(
            r#"{"patient_id": "p1", "visits": [{"admit_day": 3, "codes": ["b", "a"], "drugs": ["d"]}, {"admit_day": 9, "codes": ["a"], "drugs": []}]}"#,
            "\n",
            r#"{"patient_id": "p2", "visits": [{"admit_day": 0, "codes": ["c"], "drugs": []}, {"admit_day": 4, "codes": ["c"], "drugs": []}]}"#,
        ));
        let cohort = load_jsonl(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(&cohort, out.path()).unwrap();
        let reloaded = load_jsonl(out.path()).unwrap();
        assert_eq!(cohort.patients, reloaded.patients);
        assert_eq!(cohort.codes, reloaded.codes);
        assert_eq!(cohort.drugs, reloaded.drugs);
    }

    #[test]
    fn make_examples_skips_single_visit_patients() {
        let f = write_temp(concat!(
            r#"{"patient_id": "solo", "visits": [{"admit_day": 0, "codes": ["a"], "drugs": []}]}"#,
            "\n",
            r#"{"patient_id": "pair", "visits": [{"admit_day": 0, "codes": ["a"], "drugs": []}, {"admit_day": 7, "codes": ["b"], "drugs": []}]}"#,
        ));
        let cohort = load_jsonl(f.path()).unwrap();
        let examples = make_examples(&cohort, Task::Diagnosis);
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].patient_id, "pair");
        assert_eq!(examples[0].history.len(), 1);
        assert_eq!(examples[0].intervals, vec![0]);
    }

    #[test]
    fn heart_failure_label_is_the_428_prefix_check() {
        let f = write_temp(concat!(
            r#"{"patient_id": "hf", "visits": [{"admit_day": 0, "codes": ["x"], "drugs": []}, {"admit_day": 7, "codes": ["42822", "5849"], "drugs": []}]}"#,
            "\n",
            r#"{"patient_id": "ok", "visits": [{"admit_day": 0, "codes": ["x"], "drugs": []}, {"admit_day": 7, "codes": ["4270"], "drugs": []}]}"#,
        ));
        let cohort = load_jsonl(f.path()).unwrap();
        let examples = make_examples(&cohort, Task::HeartFailure);
        assert_eq!(examples[0].target, Target::Flag(true));
        assert_eq!(examples[1].target, Target::Flag(false));
    }

    #[test]
    fn split_sizes_are_exact_and_seed_deterministic() {
        let lines: Vec<String> = (0..20)
            .map(|i| {
                format!(
                    r#"{{"patient_id": "p{i}", "visits": [{{"admit_day": 0, "codes": ["a"], "drugs": []}}, {{"admit_day": 5, "codes": ["b"], "drugs": []}}]}}"#
                )
            })
            .collect();
        let f = write_temp(&lines.join("\n"));
        let cohort = load_jsonl(f.path()).unwrap();
        let examples = make_examples(&cohort, Task::Diagnosis);
        let (tr, va, te) = split(&examples, (12, 3, 5), 42).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (12, 3, 5));
        let (tr2, va2, te2) = split(&examples, (12, 3, 5), 42).unwrap();
        let ids = |v: &[Example]| v.iter().map(|e| e.patient_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&tr), ids(&tr2));
        assert_eq!(ids(&va), ids(&va2));
        assert_eq!(ids(&te), ids(&te2));
        // partitions stay disjoint
        let mut all = ids(&tr);
        all.extend(ids(&va));
        all.extend(ids(&te));
        let unique: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
    }

    #[test]
    fn split_shortfall_is_reported() {
        let f = write_temp(
            r#"{"patient_id": "p", "visits": [{"admit_day": 0, "codes": ["a"], "drugs": []}, {"admit_day": 5, "codes": ["b"], "drugs": []}]}"#,
        );
        let cohort = load_jsonl(f.path()).unwrap();
        let examples = make_examples(&cohort, Task::Diagnosis);
        match split(&examples, (2, 1, 1), 0) {
            Err(Error::Config(msg)) => assert!(msg.contains("short by 3"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn mimic_csv_join_drops_codeless_admissions_and_single_visit_patients() {
        let adm = write_temp(
            "SUBJECT_ID,HADM_ID,ADMITTIME\n\
             1,100,2010-01-01 10:30:00\n\
             1,101,2010-03-02 08:00:00\n\
             1,102,2010-04-01 08:00:00\n\
             2,200,2011-01-01 00:00:00\n",
        );
        let dx = write_temp(
            "SUBJECT_ID,HADM_ID,ICD9_CODE\n\
             1,100,4280\n\
             1,100,5849\n\
             1,101,4280\n\
             2,200,001\n",
        );
        let rx = write_temp(
            "SUBJECT_ID,HADM_ID,DRUG\n\
             1,100,aspirin\n\
             1,100,aspirin\n",
        );
        let cohort = load_mimic_csv(adm.path(), dx.path(), rx.path()).unwrap();
        // admission 102 has no diagnoses → dropped; subject 2 ends with 1 visit → dropped
        assert_eq!(cohort.patients.len(), 1);
        let p = &cohort.patients[0];
        assert_eq!(p.visits.len(), 2);
        assert_eq!(p.intervals, vec![0, 60]);
        // duplicate prescription rows dedupe within the visit
        assert_eq!(p.visits[0].drugs.len(), 1);
        assert!(p.visits[1].drugs.is_empty());
    }

    #[test]
    fn mimic_csv_missing_column_names_the_column() {
        let adm = write_temp("SUBJECT_ID,HADM_ID\n1,100\n");
        let dx = write_temp("SUBJECT_ID,HADM_ID,ICD9_CODE\n");
        let rx = write_temp("SUBJECT_ID,HADM_ID,DRUG\n");
        match load_mimic_csv(adm.path(), dx.path(), rx.path()) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("ADMITTIME"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn patient_line_parses_in_name_form_with_canonical_order() {
        let line = r#"{"patient_id":"p9","visits":[
            {"admit_day":40,"codes":["b"],"drugs":[]},
            {"admit_day":10,"codes":["a","c"],"drugs":["x"]}]}"#
            .replace('\n', " ");
        let p = parse_patient_line(&line).unwrap();
        assert_eq!(p.id, "p9");
        assert_eq!(p.visits[0], (10, vec!["a".to_string(), "c".to_string()], vec!["x".to_string()]));
        assert_eq!(p.visits[1].0, 40);
        assert_eq!(p.intervals, vec![0, 30]);
    }

    #[test]
    fn patient_line_rejects_empty_records() {
        assert!(parse_patient_line("not json").is_err());
        assert!(parse_patient_line(r#"{"patient_id":"p","visits":[]}"#).is_err());
        assert!(
            parse_patient_line(r#"{"patient_id":"p","visits":[{"admit_day":0,"codes":[]}]}"#)
                .is_err()
        );
    }
}
