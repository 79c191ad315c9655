//! Seeded synthetic cohort generator with planted, recoverable structure.
//!
//! Construction:
//! - codes live on the leaves of a complete tree (depth `tree_depth`,
//!   fan-out `branching`) and are split into contiguous clusters, so
//!   cluster membership and tree ancestry correlate;
//! - each cluster's codes divide into "primary" codes walked in windows
//!   of three and "satellite" codes planted to co-occur with a fixed
//!   partner primary at `cooccur_rate`;
//! - drugs are partitioned across clusters and only appear in visits of
//!   their own cluster, so drug-code co-occurrence is block structured;
//! - visit intervals follow a bounded per-cluster random walk, and the
//!   walk's step count moves the primary window, so the elapsed interval
//!   genuinely predicts the next visit's codes.
//!
//! `GroundTruth` records everything a test needs to verify recovery:
//! cluster maps, planted pair frequencies, and for every patient the
//! exact argmax set of next-visit codes under the generative process.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Patient, Visit};
use crate::config::SynthConfig;
use crate::error::Result;
use crate::ontology::{build_tree, OntologyTree, ROOT_TOKEN};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedPair {
    pub primary: String,
    pub satellite: String,
    pub configured_rate: f64,
    /// joint_visits / primary_visits over the emitted cohort.
    pub empirical_rate: f64,
    pub primary_visits: u64,
    pub joint_visits: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub code_clusters: BTreeMap<String, usize>,
    pub drug_clusters: BTreeMap<String, usize>,
    pub patient_clusters: BTreeMap<String, usize>,
    pub planted_pairs: Vec<PlantedPair>,
    /// Per patient: the code names maximizing the true probability of
    /// appearing in the visit after that patient's last one.
    pub expected_next: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub cohort: Cohort,
    pub tree: OntologyTree,
    /// `child<TAB>parent` rows behind `tree`, for serialization.
    pub edges: Vec<(String, String)>,
    pub truth: GroundTruth,
}

/// Codes of one cluster split into walked primaries and planted satellites.
struct Cluster {
    primaries: Vec<u32>,
    satellites: Vec<u32>,
    drugs: Vec<u32>,
    /// Interval bounds and walk step span, all in whole days.
    lo: i64,
    hi: i64,
    span: i64,
    /// Days per window step.
    unit: i64,
}

impl Cluster {
    fn window(&self, pos: usize) -> Vec<u32> {
        let n = self.primaries.len();
        let take = n.min(3);
        let mut out = Vec::with_capacity(take);
        for o in 0..take {
            let c = self.primaries[(pos + o) % n];
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    fn steps(&self, interval: i64) -> usize {
        (interval as f64 / self.unit as f64).round() as usize
    }
}

fn code_names(cfg: &SynthConfig) -> Vec<String> {
    // cluster 0 gets heart-failure-shaped names so the flag task has
    // positives on synthetic data
    let bound = cluster_bounds(cfg.n_codes, cfg.n_clusters)[1];
    (0..cfg.n_codes)
        .map(|i| {
            if i < bound {
                format!("428{i}")
            } else {
                format!("dx{i}")
            }
        })
        .collect()
}

/// Contiguous near-equal ranges: boundaries[k]..boundaries[k+1] is cluster k.
fn cluster_bounds(n: usize, k: usize) -> Vec<usize> {
    (0..=k).map(|i| i * n / k).collect()
}

/// Complete-tree edges for the given leaf codes: leaf i hangs under the
/// chain of its base-`branching` digit prefixes.
fn tree_edges(cfg: &SynthConfig, names: &[String]) -> Vec<(String, String)> {
    let mut edges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, name) in names.iter().enumerate() {
        // digits of i, most significant first, one per level above the leaf
        let mut digits = vec![0usize; cfg.tree_depth];
        let mut rest = i;
        for d in (0..cfg.tree_depth).rev() {
            digits[d] = rest % cfg.branching;
            rest /= cfg.branching;
        }
        let prefix_name = |level: usize| {
            // level in 1..tree_depth names an internal node
            let digits_part: Vec<String> = digits[..level].iter().map(|d| d.to_string()).collect();
            format!("n{level}_{}", digits_part.join("."))
        };
        let mut parent = ROOT_TOKEN.to_string();
        for level in 1..cfg.tree_depth {
            let node = prefix_name(level);
            if seen.insert(node.clone()) {
                edges.push((node.clone(), parent.clone()));
            }
            parent = node;
        }
        edges.push((name.clone(), parent));
        seen.insert(name.clone());
    }
    edges
}

/// Probability of each step count for the visit after the history, given
/// the last observed interval (or None when only one visit exists and the
/// next interval is the initial uniform draw).
fn step_distribution(cluster: &Cluster, last_interval: Option<i64>) -> BTreeMap<usize, f64> {
    let mut interval_mass: BTreeMap<i64, f64> = BTreeMap::new();
    match last_interval {
        None => {
            let n = (cluster.hi - cluster.lo + 1) as f64;
            for d in cluster.lo..=cluster.hi {
                *interval_mass.entry(d).or_insert(0.0) += 1.0 / n;
            }
        }
        Some(prev) => {
            let n = (2 * cluster.span + 1) as f64;
            for u in -cluster.span..=cluster.span {
                let d = (prev + u).clamp(cluster.lo, cluster.hi);
                *interval_mass.entry(d).or_insert(0.0) += 1.0 / n;
            }
        }
    }
    let mut steps = BTreeMap::new();
    for (d, p) in interval_mass {
        *steps.entry(cluster.steps(d)).or_insert(0.0) += p;
    }
    steps
}

/// True next-visit code probabilities from a position and the step
/// distribution; satellites ride on their primary at `cooccur_rate`.
fn next_code_probs(
    cluster: &Cluster,
    pos: usize,
    last_interval: Option<i64>,
    cooccur_rate: f64,
) -> BTreeMap<u32, f64> {
    let mut probs: BTreeMap<u32, f64> = BTreeMap::new();
    for (k, p) in step_distribution(cluster, last_interval) {
        for c in cluster.window(pos + k) {
            *probs.entry(c).or_insert(0.0) += p;
        }
    }
    let pair_count = cluster.primaries.len().min(cluster.satellites.len());
    for i in 0..pair_count {
        let p_primary = probs.get(&cluster.primaries[i]).copied().unwrap_or(0.0);
        if p_primary > 0.0 && cooccur_rate > 0.0 {
            probs.insert(cluster.satellites[i], p_primary * cooccur_rate);
        }
    }
    probs
}

fn argmax_set(probs: &BTreeMap<u32, f64>) -> Vec<u32> {
    let best = probs.values().cloned().fold(f64::MIN, f64::max);
    probs
        .iter()
        .filter(|(_, &p)| (best - p).abs() < 1e-12)
        .map(|(&c, _)| c)
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let names = code_names(cfg);
    let bounds = cluster_bounds(cfg.n_codes, cfg.n_clusters);
    let drug_names: Vec<String> = (0..cfg.n_drugs).map(|i| format!("rx{i}")).collect();

    let mut clusters: Vec<Cluster> = Vec::with_capacity(cfg.n_clusters);
    for k in 0..cfg.n_clusters {
        let members: Vec<u32> = (bounds[k] as u32..bounds[k + 1] as u32).collect();
        let n_prim = members.len().div_ceil(2);
        let (mean, jitter) = cfg.interval_profiles[k];
        let lo = (mean - jitter).round().max(1.0) as i64;
        let hi = ((mean + jitter).round() as i64).max(lo);
        clusters.push(Cluster {
            primaries: members[..n_prim].to_vec(),
            satellites: members[n_prim..].to_vec(),
            drugs: (0..cfg.n_drugs as u32).filter(|d| *d as usize % cfg.n_clusters == k).collect(),
            lo,
            hi,
            span: ((jitter / 2.0).round() as i64).max(1),
            unit: (mean / 2.0).round().max(1.0) as i64,
        });
    }

    // pair tracking indexed (cluster, pair slot)
    let mut primary_visits: Vec<Vec<u64>> = clusters
        .iter()
        .map(|c| vec![0; c.primaries.len().min(c.satellites.len())])
        .collect();
    let mut joint_visits = primary_visits.clone();

    let mut cohort = Cohort::default();
    for n in &names {
        cohort.codes.get_or_insert(n);
    }
    let mut truth = GroundTruth {
        code_clusters: BTreeMap::new(),
        drug_clusters: BTreeMap::new(),
        patient_clusters: BTreeMap::new(),
        planted_pairs: Vec::new(),
        expected_next: BTreeMap::new(),
    };
    for k in 0..cfg.n_clusters {
        for i in bounds[k]..bounds[k + 1] {
            truth.code_clusters.insert(names[i].clone(), k);
        }
    }
    for (d, name) in drug_names.iter().enumerate() {
        truth.drug_clusters.insert(name.clone(), d % cfg.n_clusters);
    }

    // deterministic per-cluster drug rotation guarantees every drug of a
    // visited cluster appears in some visit
    let mut drug_cursor = vec![0usize; cfg.n_clusters];

    for pi in 0..cfg.n_patients {
        let k = pi % cfg.n_clusters;
        let cluster = &clusters[k];
        let id = format!("p{pi}");
        truth.patient_clusters.insert(id.clone(), k);

        let n_visits = rng.gen_range(cfg.visits_min..=cfg.visits_max);
        let mut pos = rng.gen_range(0..cluster.primaries.len());
        let mut day = rng.gen_range(0..30i64);
        let mut interval: Option<i64> = None;

        let mut visits = Vec::with_capacity(n_visits);
        let mut intervals = Vec::with_capacity(n_visits);
        for t in 0..n_visits {
            if t > 0 {
                let next = match interval {
                    None => rng.gen_range(cluster.lo..=cluster.hi),
                    Some(prev) => {
                        (prev + rng.gen_range(-cluster.span..=cluster.span))
                            .clamp(cluster.lo, cluster.hi)
                    }
                };
                pos += cluster.steps(next);
                day += next;
                interval = Some(next);
                intervals.push(next);
            } else {
                intervals.push(0);
            }

            let mut codes = cluster.window(pos);
            let pair_count = primary_visits[k].len();
            for i in 0..pair_count {
                if codes.contains(&cluster.primaries[i]) {
                    primary_visits[k][i] += 1;
                    if rng.gen_bool(cfg.cooccur_rate) {
                        codes.push(cluster.satellites[i]);
                        joint_visits[k][i] += 1;
                    }
                }
            }

            let mut drugs = Vec::new();
            if !cluster.drugs.is_empty() {
                drugs.push(cluster.drugs[drug_cursor[k] % cluster.drugs.len()]);
                drug_cursor[k] += 1;
                let extra = cluster.drugs[rng.gen_range(0..cluster.drugs.len())];
                if !drugs.contains(&extra) {
                    drugs.push(extra);
                }
            }

            visits.push(Visit { admit_day: day, codes, drugs });
        }

        // the held-out target is the visit after the second-to-last
        // position; enumerate the generative step distribution exactly
        let history_last_pos = {
            // replay: position before the final visit
            let final_interval = intervals[n_visits - 1];
            pos - cluster.steps(final_interval)
        };
        let history_last_interval = if n_visits == 2 {
            None
        } else {
            Some(intervals[n_visits - 2])
        };
        let probs = next_code_probs(cluster, history_last_pos, history_last_interval, cfg.cooccur_rate);
        truth.expected_next.insert(
            id.clone(),
            argmax_set(&probs)
                .iter()
                .map(|&c| names[c as usize].clone())
                .collect(),
        );

        cohort.patients.push(Patient { id, visits, intervals });
    }

    // register drugs in first-appearance order over the emitted visits
    let mut remap: Vec<Option<u32>> = vec![None; cfg.n_drugs];
    for p in &mut cohort.patients {
        for v in &mut p.visits {
            for d in &mut v.drugs {
                let new = match remap[*d as usize] {
                    Some(x) => x,
                    None => {
                        let x = cohort.drugs.get_or_insert(&drug_names[*d as usize]);
                        remap[*d as usize] = Some(x);
                        x
                    }
                };
                *d = new;
            }
        }
    }

    for (k, cluster) in clusters.iter().enumerate() {
        for i in 0..primary_visits[k].len() {
            let pv = primary_visits[k][i];
            truth.planted_pairs.push(PlantedPair {
                primary: names[cluster.primaries[i] as usize].clone(),
                satellite: names[cluster.satellites[i] as usize].clone(),
                configured_rate: cfg.cooccur_rate,
                empirical_rate: if pv > 0 { joint_visits[k][i] as f64 / pv as f64 } else { 0.0 },
                primary_visits: pv,
                joint_visits: joint_visits[k][i],
            });
        }
    }

    let edges = tree_edges(cfg, &names);
    let tree = build_tree("synthetic", &edges, &cohort.codes, cfg.tree_depth)?;
    Ok(Generated { cohort, tree, edges, truth })
}
