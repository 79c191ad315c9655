//! Evaluation metrics over batch predictions.
//!
//! Multi-label scores live in an n x |C| probability matrix; true sets
//! are sparse code-id lists. The w-F1 binarization threshold is 0.5 (a
//! convention, not something the upstream metric definitions fix), so
//! absolute w-F1 values only compare against runs using the same rule.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean recall plus how many examples actually contributed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallOutcome {
    pub mean: f64,
    pub used: usize,
    pub skipped: usize,
}

fn check_rows(pred: &Array2<f64>, truth: &[Vec<u32>], op: &'static str) -> Result<()> {
    if pred.nrows() != truth.len() {
        return Err(Error::shape(op, (pred.nrows(), pred.ncols()), (truth.len(), 0)));
    }
    Ok(())
}

/// Per-code F1 at threshold 0.5, weighted by the code's true support.
/// Codes nobody truly has are excluded; if that excludes everything,
/// the metric is undefined and errors.
pub fn weighted_f1(pred: &Array2<f64>, truth: &[Vec<u32>]) -> Result<f64> {
    check_rows(pred, truth, "weighted_f1")?;
    let n_codes = pred.ncols();
    let mut tp = vec![0u64; n_codes];
    let mut fp = vec![0u64; n_codes];
    let mut fn_ = vec![0u64; n_codes];
    for (i, true_set) in truth.iter().enumerate() {
        let set: HashSet<u32> = true_set.iter().copied().collect();
        for c in 0..n_codes {
            let predicted = pred[(i, c)] >= 0.5;
            let actual = set.contains(&(c as u32));
            match (predicted, actual) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let mut weighted = 0.0;
    let mut total_support = 0u64;
    for c in 0..n_codes {
        let support = tp[c] + fn_[c];
        if support == 0 {
            continue;
        }
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp[c] as f64 / denom as f64 };
        weighted += support as f64 * f1;
        total_support += support;
    }
    if total_support == 0 {
        return Err(Error::Config("weighted_f1 over a batch with no true labels".into()));
    }
    Ok(weighted / total_support as f64)
}

/// Indices of the k largest scores, ties broken by ascending index.
/// k is clamped to the row width.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// Mean over examples of |top-k ∩ true| / |true|. Examples with empty
/// true sets are skipped and counted.
pub fn recall_at_k(pred: &Array2<f64>, truth: &[Vec<u32>], k: usize) -> Result<RecallOutcome> {
    check_rows(pred, truth, "recall_at_k")?;
    if k == 0 {
        return Err(Error::Config("recall_at_k needs k >= 1".into()));
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (i, true_set) in truth.iter().enumerate() {
        if true_set.is_empty() {
            skipped += 1;
            continue;
        }
        let row: Vec<f64> = pred.row(i).to_vec();
        let top: HashSet<u32> = top_k_indices(&row, k).into_iter().map(|c| c as u32).collect();
        let set: HashSet<u32> = true_set.iter().copied().collect();
        let hit = set.intersection(&top).count();
        total += hit as f64 / set.len() as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Config("recall_at_k over a batch with no nonempty true sets".into()));
    }
    Ok(RecallOutcome { mean: total / used as f64, used, skipped })
}

/// Mann-Whitney AUC: P(positive scores above negative) with half
/// credit for ties. Pair counting is quadratic, which is fine at the
/// cohort sizes this crate targets.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", (scores.len(), 1), (labels.len(), 1)));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Config("auc needs both classes present".into()));
    }
    let mut credit = 0.0;
    for &p in &pos {
        for &n in &neg {
            credit += match p.total_cmp(&n) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    Ok(credit / (pos.len() * neg.len()) as f64)
}

/// Standard F1 on thresholded scores; zero denominators give 0.
pub fn binary_f1(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Recall@k separately over codes the patient already had (occurred)
/// and codes new in the target visit (emerging). `seen[i]` holds every
/// code in example i's history. Examples whose partition is empty skip
/// that partition's average.
pub fn occurred_emerging_recall(
    pred: &Array2<f64>,
    truth: &[Vec<u32>],
    seen: &[Vec<u32>],
    k: usize,
) -> Result<(RecallOutcome, RecallOutcome)> {
    check_rows(pred, truth, "occurred_emerging_recall")?;
    if seen.len() != truth.len() {
        return Err(Error::shape("occurred_emerging_recall", (seen.len(), 0), (truth.len(), 0)));
    }
    let mut occurred: Vec<Vec<u32>> = Vec::with_capacity(truth.len());
    let mut emerging: Vec<Vec<u32>> = Vec::with_capacity(truth.len());
    for (true_set, seen_codes) in truth.iter().zip(seen) {
        let seen_set: HashSet<u32> = seen_codes.iter().copied().collect();
        occurred.push(true_set.iter().copied().filter(|c| seen_set.contains(c)).collect());
        emerging.push(true_set.iter().copied().filter(|c| !seen_set.contains(c)).collect());
    }
    Ok((recall_at_k(pred, &occurred, k)?, recall_at_k(pred, &emerging, k)?))
}

/// One run's metric values. Absent metrics (wrong task) serialize away.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_f1: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub r_at: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub r_at_occurred: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub r_at_emerging: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
}

impl MetricSet {
    fn flatten(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        if let Some(v) = self.w_f1 {
            out.insert("w_f1".to_string(), v);
        }
        for (k, v) in &self.r_at {
            out.insert(format!("r_at.{k}"), *v);
        }
        for (k, v) in &self.r_at_occurred {
            out.insert(format!("r_at_occurred.{k}"), *v);
        }
        for (k, v) in &self.r_at_emerging {
            out.insert(format!("r_at_emerging.{k}"), *v);
        }
        if let Some(v) = self.auc {
            out.insert("auc".to_string(), v);
        }
        if let Some(v) = self.f1 {
            out.insert("f1".to_string(), v);
        }
        out
    }

    fn unflatten(flat: &BTreeMap<String, f64>) -> MetricSet {
        let mut set = MetricSet::default();
        for (k, &v) in flat {
            if k == "w_f1" {
                set.w_f1 = Some(v);
            } else if k == "auc" {
                set.auc = Some(v);
            } else if k == "f1" {
                set.f1 = Some(v);
            } else if let Some(rest) = k.strip_prefix("r_at_occurred.") {
                set.r_at_occurred.insert(rest.to_string(), v);
            } else if let Some(rest) = k.strip_prefix("r_at_emerging.") {
                set.r_at_emerging.insert(rest.to_string(), v);
            } else if let Some(rest) = k.strip_prefix("r_at.") {
                set.r_at.insert(rest.to_string(), v);
            }
        }
        set
    }
}

/// Mean and population std per metric across seed runs. Metrics must
/// be present in every run to aggregate.
pub fn aggregate(runs: &[MetricSet]) -> Result<(MetricSet, MetricSet)> {
    if runs.is_empty() {
        return Err(Error::Config("aggregate over zero runs".into()));
    }
    let flats: Vec<BTreeMap<String, f64>> = runs.iter().map(|r| r.flatten()).collect();
    let keys: Vec<String> = flats[0].keys().cloned().collect();
    for (i, f) in flats.iter().enumerate() {
        if f.keys().cloned().collect::<Vec<_>>() != keys {
            return Err(Error::Config(format!(
                "seed run {i} reports a different metric set than run 0"
            )));
        }
    }
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    let n = runs.len() as f64;
    for k in &keys {
        let vals: Vec<f64> = flats.iter().map(|f| f[k]).collect();
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean.insert(k.clone(), mu);
        std.insert(k.clone(), var.sqrt());
    }
    Ok((MetricSet::unflatten(&mean), MetricSet::unflatten(&std)))
}

/// Full evaluation output, one seed run per entry in `seeds`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: MetricSet,
    pub seeds: Vec<MetricSet>,
    pub mean: MetricSet,
    pub std: MetricSet,
    pub examples: usize,
    pub skipped_empty_truth: usize,
}

impl EvalReport {
    /// Single- or multi-seed report; `metrics` and `mean` are the
    /// across-seed mean.
    pub fn from_runs(
        task: &str,
        seeds: Vec<MetricSet>,
        examples: usize,
        skipped_empty_truth: usize,
    ) -> Result<EvalReport> {
        let (mean, std) = aggregate(&seeds)?;
        Ok(EvalReport {
            task: task.to_string(),
            metrics: mean.clone(),
            seeds,
            mean,
            std,
            examples,
            skipped_empty_truth,
        })
    }
}
