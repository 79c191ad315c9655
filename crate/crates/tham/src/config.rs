//! Flat `key = value` configuration: parsing, per-task model defaults,
//! synthetic-cohort settings, and the resolved-snapshot round trip that
//! every run writes next to its outputs.
//!
//! The format is deliberately trivial: one `key = value` per line, `#`
//! starts a comment, lists are comma-separated, learning-rate milestones
//! are `epoch:rate` pairs. Unknown keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::cohort::Task;
use crate::error::{Error, Result};

/// Ordered key/value pairs from a config file plus command-line
/// overrides. Later entries win on duplicate keys.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: Vec<(String, String, String)>, // key, value, origin for error messages
}

impl RawConfig {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn parse_str(text: &str, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = format!("{source}:{}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}: expected key = value, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("{origin}: empty key")));
            }
            entries.push((key.to_string(), value.trim().to_string(), origin));
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Add a `key=value` override (from `--set`); overrides win over file entries.
    pub fn push_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?}: expected key=value")))?;
        self.entries.push((
            key.trim().to_string(),
            value.trim().to_string(),
            format!("--set {}", key.trim()),
        ));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    fn origin(&self, key: &str) -> &str {
        self.entries
            .iter()
            .rev()
            .find(|(k, _, _)| k == key)
            .map(|(_, _, o)| o.as_str())
            .unwrap_or("<default>")
    }

    /// Fail on any key outside `allowed`, naming the key and where it came from.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for (k, _, origin) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!("{origin}: unknown key {k:?}")));
            }
        }
        Ok(())
    }

    fn bad(&self, key: &str, value: &str, expected: &str) -> Error {
        Error::Config(format!(
            "{}: {key} = {value:?}: expected {expected}",
            self.origin(key)
        ))
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, v, "an unsigned integer")),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, v, "an unsigned integer")),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, v, "a number")),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(self.bad(key, v, "true or false")),
        }
    }

    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| self.bad(key, v, "comma-separated integers")))
                .collect(),
        }
    }

    /// `epoch:rate` pairs, e.g. `10:0.01,100:0.001`. An empty value is an
    /// empty schedule, so a constant-rate snapshot reloads cleanly.
    pub fn get_milestones(&self, key: &str, default: &[(usize, f64)]) -> Result<Vec<(usize, f64)>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|pair| {
                    let (e, r) = pair
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| self.bad(key, v, "comma-separated epoch:rate pairs"))?;
                    let epoch = e.trim().parse().map_err(|_| self.bad(key, v, "epoch:rate pairs"))?;
                    let rate = r.trim().parse().map_err(|_| self.bad(key, v, "epoch:rate pairs"))?;
                    Ok((epoch, rate))
                })
                .collect(),
        }
    }

    /// `mean:jitter` pairs (days), one per cluster.
    pub fn get_profiles(&self, key: &str, default: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|pair| {
                    let (m, j) = pair
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| self.bad(key, v, "comma-separated mean:jitter pairs"))?;
                    let mean = m.trim().parse().map_err(|_| self.bad(key, v, "mean:jitter pairs"))?;
                    let jitter = j.trim().parse().map_err(|_| self.bad(key, v, "mean:jitter pairs"))?;
                    Ok((mean, jitter))
                })
                .collect(),
        }
    }
}

/// Everything the model and training loop need. Defaults follow the
/// published settings per task; any key can be overridden.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Per-level code embedding width; a code's input embedding is the
    /// concatenation of `tree_depth` level embeddings, so the graph
    /// network sees `tree_depth * m_c` input features per code.
    pub m_c: usize,
    /// Drug embedding width (graph-network drug input features).
    pub m_d: usize,
    /// Per-layer code feature widths; the last entry is the visit
    /// embedding width m used by the whole sequence model.
    pub gnn_code_dims: Vec<usize>,
    /// Per-layer drug feature widths; same length as `gnn_code_dims`.
    pub gnn_drug_dims: Vec<usize>,
    /// Time-gate hidden width.
    pub a: usize,
    /// Query width of the comprehensive attention stage.
    pub q: usize,
    /// Projection width of the preliminary attention stage.
    pub b: usize,
    /// Ontology depth (levels below the root).
    pub tree_depth: usize,
    /// Co-occurrence threshold for the code-code graph.
    pub lambda: f64,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ffn_size: usize,
    pub dropout: f64,
    /// Interval scaling constant (days) inside the time gates.
    pub time_divisor: f64,
    /// Affine layers in the prediction head; 1 is a single linear map
    /// straight to the output logits.
    pub head_depth: usize,
    pub epochs: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Inclusive decay points: from epoch e onward, use the paired rate.
    pub lr_milestones: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub seed: u64,
    /// Ablation: code embeddings become one unstructured matrix.
    pub no_hierarchy: bool,
    /// Ablation: visit vectors skip the interval gate.
    pub no_time_embed: bool,
    /// Ablation: final attention is the preliminary distribution alone.
    pub no_comprehensive: bool,
    /// Ablation: both of the above.
    pub no_time_and_comp: bool,
}

pub const MODEL_KEYS: &[&str] = &[
    "task",
    "m_c",
    "m_d",
    "gnn_code_dims",
    "gnn_drug_dims",
    "a",
    "q",
    "b",
    "tree_depth",
    "lambda",
    "heads",
    "encoder_layers",
    "ffn_size",
    "dropout",
    "time_divisor",
    "head_depth",
    "epochs",
    "lr",
    "lr_milestones",
    "batch_size",
    "seed",
    "no_hierarchy",
    "no_time_embed",
    "no_comprehensive",
    "no_time_and_comp",
];

impl ModelConfig {
    /// Published defaults for each task (MIMIC-III settings).
    pub fn defaults(task: Task) -> Self {
        match task {
            Task::Diagnosis => ModelConfig {
                task,
                m_c: 48,
                m_d: 64,
                gnn_code_dims: vec![64, 192],
                gnn_drug_dims: vec![64, 64],
                a: 64,
                q: 64,
                b: 32,
                tree_depth: 4,
                lambda: 0.01,
                heads: 4,
                encoder_layers: 1,
                ffn_size: 1024,
                dropout: 0.0,
                time_divisor: 180.0,
                head_depth: 1,
                epochs: 200,
                lr: 1e-1,
                lr_milestones: vec![(10, 1e-2), (100, 1e-3), (200, 1e-4)],
                batch_size: 32,
                seed: 42,
                no_hierarchy: false,
                no_time_embed: false,
                no_comprehensive: false,
                no_time_and_comp: false,
            },
            Task::HeartFailure => ModelConfig {
                task,
                m_c: 7,
                m_d: 16,
                gnn_code_dims: vec![10, 28],
                gnn_drug_dims: vec![16, 16],
                a: 16,
                q: 16,
                b: 32,
                tree_depth: 4,
                lambda: 0.01,
                heads: 4,
                encoder_layers: 1,
                ffn_size: 1024,
                dropout: 0.0,
                time_divisor: 180.0,
                head_depth: 1,
                epochs: 100,
                lr: 1e-2,
                lr_milestones: vec![(2, 1e-3), (3, 1e-4), (20, 1e-5)],
                batch_size: 32,
                seed: 42,
                no_hierarchy: false,
                no_time_embed: false,
                no_comprehensive: false,
                no_time_and_comp: false,
            },
        }
    }

    /// Apply raw overrides on top of the task's defaults, then validate.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let task = match raw.get("task") {
            None => Task::Diagnosis,
            Some(s) => Task::parse(s)?,
        };
        let d = Self::defaults(task);
        let cfg = ModelConfig {
            task,
            m_c: raw.get_usize("m_c", d.m_c)?,
            m_d: raw.get_usize("m_d", d.m_d)?,
            gnn_code_dims: raw.get_usize_list("gnn_code_dims", &d.gnn_code_dims)?,
            gnn_drug_dims: raw.get_usize_list("gnn_drug_dims", &d.gnn_drug_dims)?,
            a: raw.get_usize("a", d.a)?,
            q: raw.get_usize("q", d.q)?,
            b: raw.get_usize("b", d.b)?,
            tree_depth: raw.get_usize("tree_depth", d.tree_depth)?,
            lambda: raw.get_f64("lambda", d.lambda)?,
            heads: raw.get_usize("heads", d.heads)?,
            encoder_layers: raw.get_usize("encoder_layers", d.encoder_layers)?,
            ffn_size: raw.get_usize("ffn_size", d.ffn_size)?,
            dropout: raw.get_f64("dropout", d.dropout)?,
            time_divisor: raw.get_f64("time_divisor", d.time_divisor)?,
            head_depth: raw.get_usize("head_depth", d.head_depth)?,
            epochs: raw.get_usize("epochs", d.epochs)?,
            lr: raw.get_f64("lr", d.lr)?,
            lr_milestones: raw.get_milestones("lr_milestones", &d.lr_milestones)?,
            batch_size: raw.get_usize("batch_size", d.batch_size)?,
            seed: raw.get_u64("seed", d.seed)?,
            no_hierarchy: raw.get_bool("no_hierarchy", false)?,
            no_time_embed: raw.get_bool("no_time_embed", false)?,
            no_comprehensive: raw.get_bool("no_comprehensive", false)?,
            no_time_and_comp: raw.get_bool("no_time_and_comp", false)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Visit embedding width m: the final code feature width, or the raw
    /// concatenated embedding width when there are no graph layers.
    pub fn m(&self) -> usize {
        self.gnn_code_dims
            .last()
            .copied()
            .unwrap_or(self.tree_depth * self.m_c)
    }

    pub fn layers(&self) -> usize {
        self.gnn_code_dims.len()
    }

    pub fn ablate_time(&self) -> bool {
        self.no_time_embed || self.no_time_and_comp
    }

    pub fn ablate_comprehensive(&self) -> bool {
        self.no_comprehensive || self.no_time_and_comp
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.gnn_code_dims.len() != self.gnn_drug_dims.len() {
            return fail(format!(
                "gnn_code_dims has {} layers but gnn_drug_dims has {}",
                self.gnn_code_dims.len(),
                self.gnn_drug_dims.len()
            ));
        }
        for (name, v) in [
            ("m_c", self.m_c),
            ("m_d", self.m_d),
            ("a", self.a),
            ("q", self.q),
            ("b", self.b),
            ("tree_depth", self.tree_depth),
            ("heads", self.heads),
            ("ffn_size", self.ffn_size),
            ("head_depth", self.head_depth),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.gnn_code_dims.iter().chain(&self.gnn_drug_dims).any(|&v| v == 0) {
            return fail("gnn layer dims must be positive".into());
        }
        let m = self.m();
        if m % 2 != 0 {
            return fail(format!(
                "visit embedding width m = {m} must be even for the sinusoidal positions"
            ));
        }
        if m % self.heads != 0 {
            return fail(format!("m = {m} is not divisible by heads = {}", self.heads));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda = {} must be in [0, 1]", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout = {} must be in [0, 1)", self.dropout));
        }
        if self.time_divisor <= 0.0 {
            return fail("time_divisor must be positive".into());
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return fail(format!("lr = {} must be a positive number", self.lr));
        }
        for w in self.lr_milestones.windows(2) {
            if w[0].0 >= w[1].0 {
                return fail(format!(
                    "lr_milestones must be strictly increasing in epoch ({} then {})",
                    w[0].0, w[1].0
                ));
            }
        }
        if self.lr_milestones.iter().any(|&(_, r)| r <= 0.0 || !r.is_finite()) {
            return fail("lr_milestones rates must be positive numbers".into());
        }
        Ok(())
    }

    /// Canonical snapshot: sorted keys, values formatted so that parsing
    /// the snapshot back reproduces this config exactly.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let list = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let milestones = self
            .lr_milestones
            .iter()
            .map(|(e, r)| format!("{e}:{r}"))
            .collect::<Vec<_>>()
            .join(",");
        m.insert("task".into(), self.task.as_str().into());
        m.insert("m_c".into(), self.m_c.to_string());
        m.insert("m_d".into(), self.m_d.to_string());
        m.insert("gnn_code_dims".into(), list(&self.gnn_code_dims));
        m.insert("gnn_drug_dims".into(), list(&self.gnn_drug_dims));
        m.insert("a".into(), self.a.to_string());
        m.insert("q".into(), self.q.to_string());
        m.insert("b".into(), self.b.to_string());
        m.insert("tree_depth".into(), self.tree_depth.to_string());
        m.insert("lambda".into(), self.lambda.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("encoder_layers".into(), self.encoder_layers.to_string());
        m.insert("ffn_size".into(), self.ffn_size.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("time_divisor".into(), self.time_divisor.to_string());
        m.insert("head_depth".into(), self.head_depth.to_string());
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("lr".into(), self.lr.to_string());
        m.insert("lr_milestones".into(), milestones);
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("no_hierarchy".into(), self.no_hierarchy.to_string());
        m.insert("no_time_embed".into(), self.no_time_embed.to_string());
        m.insert("no_comprehensive".into(), self.no_comprehensive.to_string());
        m.insert("no_time_and_comp".into(), self.no_time_and_comp.to_string());
        m
    }

    /// Rebuild from a snapshot map (checkpoint trailer path).
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut raw = RawConfig::empty();
        for (k, v) in map {
            raw.entries.push((k.clone(), v.clone(), "snapshot".into()));
        }
        raw.reject_unknown(MODEL_KEYS)?;
        Self::from_raw(&raw)
    }

    /// Effective learning rate for a 1-indexed epoch (milestones inclusive).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &(e, r) in &self.lr_milestones {
            if epoch >= e {
                lr = r;
            }
        }
        lr
    }
}

/// Settings for the seeded synthetic cohort generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_codes: usize,
    pub n_drugs: usize,
    pub tree_depth: usize,
    pub branching: usize,
    pub n_clusters: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    /// Per-cluster (mean days between visits, jitter); exactly one entry
    /// per cluster.
    pub interval_profiles: Vec<(f64, f64)>,
    pub cooccur_rate: f64,
    pub seed: u64,
}

pub const SYNTH_KEYS: &[&str] = &[
    "n_patients",
    "n_codes",
    "n_drugs",
    "tree_depth",
    "branching",
    "n_clusters",
    "visit_count",
    "interval_profiles",
    "cooccur_rate",
    "seed",
];

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 200,
            n_codes: 48,
            n_drugs: 16,
            tree_depth: 3,
            branching: 4,
            n_clusters: 4,
            visits_min: 3,
            visits_max: 9,
            interval_profiles: vec![(30.0, 5.0), (60.0, 8.0), (90.0, 10.0), (150.0, 20.0)],
            cooccur_rate: 0.7,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let d = SynthConfig::default();
        let visit_count = raw.get_usize_list("visit_count", &[d.visits_min, d.visits_max])?;
        if visit_count.len() != 2 {
            return Err(Error::Config(format!(
                "visit_count wants two entries min,max, got {}",
                visit_count.len()
            )));
        }
        let cfg = SynthConfig {
            n_patients: raw.get_usize("n_patients", d.n_patients)?,
            n_codes: raw.get_usize("n_codes", d.n_codes)?,
            n_drugs: raw.get_usize("n_drugs", d.n_drugs)?,
            tree_depth: raw.get_usize("tree_depth", d.tree_depth)?,
            branching: raw.get_usize("branching", d.branching)?,
            n_clusters: raw.get_usize("n_clusters", d.n_clusters)?,
            visits_min: visit_count[0],
            visits_max: visit_count[1],
            interval_profiles: raw.get_profiles("interval_profiles", &d.interval_profiles)?,
            cooccur_rate: raw.get_f64("cooccur_rate", d.cooccur_rate)?,
            seed: raw.get_u64("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("n_patients", self.n_patients),
            ("n_codes", self.n_codes),
            ("n_drugs", self.n_drugs),
            ("tree_depth", self.tree_depth),
            ("branching", self.branching),
            ("n_clusters", self.n_clusters),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.visits_min < 2 {
            return fail(format!(
                "visit_count minimum {} is below 2 (every patient needs a history and a target)",
                self.visits_min
            ));
        }
        if self.visits_max < self.visits_min {
            return fail(format!(
                "visit_count maximum {} is below the minimum {}",
                self.visits_max, self.visits_min
            ));
        }
        let capacity = (self.branching as u128).checked_pow(self.tree_depth as u32);
        match capacity {
            Some(cap) if (self.n_codes as u128) <= cap => {}
            _ => {
                return fail(format!(
                    "n_codes = {} exceeds the leaf capacity {}^{} of the code tree",
                    self.n_codes, self.branching, self.tree_depth
                ))
            }
        }
        if self.n_clusters > self.n_codes {
            return fail(format!(
                "n_clusters = {} exceeds n_codes = {}",
                self.n_clusters, self.n_codes
            ));
        }
        if self.interval_profiles.len() != self.n_clusters {
            return fail(format!(
                "interval_profiles has {} entries but n_clusters = {}",
                self.interval_profiles.len(),
                self.n_clusters
            ));
        }
        if self
            .interval_profiles
            .iter()
            .any(|&(m, j)| m < 1.0 || j < 0.0 || !m.is_finite() || !j.is_finite())
        {
            return fail("interval_profiles wants mean >= 1 and jitter >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.cooccur_rate) {
            return fail(format!(
                "cooccur_rate = {} must be in [0, 1]",
                self.cooccur_rate
            ));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("n_patients".into(), self.n_patients.to_string());
        m.insert("n_codes".into(), self.n_codes.to_string());
        m.insert("n_drugs".into(), self.n_drugs.to_string());
        m.insert("tree_depth".into(), self.tree_depth.to_string());
        m.insert("branching".into(), self.branching.to_string());
        m.insert("n_clusters".into(), self.n_clusters.to_string());
        m.insert(
            "visit_count".into(),
            format!("{},{}", self.visits_min, self.visits_max),
        );
        m.insert(
            "interval_profiles".into(),
            self.interval_profiles
                .iter()
                .map(|(mean, j)| format!("{mean}:{j}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("cooccur_rate".into(), self.cooccur_rate.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }
}

/// Render a snapshot map in the same `key = value` format the parser reads.
pub fn render_map(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
