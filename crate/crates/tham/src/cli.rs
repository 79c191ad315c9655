//! Command-line surface: cohort generation, training, evaluation,
//! single-patient prediction, and embedding export.
//!
//! Conventions shared by every subcommand:
//! - configuration is `key = value` lines plus repeatable `--set key=value`
//!   overrides (overrides win); unknown keys are rejected with their origin;
//! - commands that produce artifacts write the fully resolved configuration
//!   as `resolved.cfg` next to them, and that file alone reproduces the run;
//! - path flags (`--data`, `--out`, ...) may instead come from config keys
//!   of the same name, which is what makes resolved.cfg self-sufficient;
//! - exit codes: 0 ok, 2 config/schema, 3 numeric failure, 4 I/O.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::checkpoint::{self, Loaded};
use crate::cograph;
use crate::cohort::{self, Example, Target, Task, Vocab};
use crate::config::{
    render_map, ModelConfig, RawConfig, SynthConfig, MODEL_KEYS, SYNTH_KEYS,
};
use crate::error::{Error, Result};
use crate::metrics::{
    auc, binary_f1, occurred_emerging_recall, recall_at_k, weighted_f1, EvalReport, MetricSet,
};
use crate::model::{extend_features, predict_topk, unk_row, AttentionTrace, Tham};
use crate::ontology::load_ontology;
use crate::synth;
use crate::tensor::{Phase, Tensor};
use crate::train::fit;

/// Keys the command layer adds on top of the model and generator sets:
/// artifact paths and the train/valid/test fractions.
pub const RUN_KEYS: &[&str] = &["data", "ontology", "out", "checkpoint", "split"];

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.75, 0.10, 0.15);

const ABLATIONS: &[&str] =
    &["no_hierarchy", "no_time_embed", "no_comprehensive", "no_time_and_comp"];

#[derive(Parser)]
#[command(
    name = "tham",
    version,
    about = "Health-event prediction over coded visit sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: cohort.jsonl, ontology.tsv, truth.json.
    Generate {
        /// Config file of generator keys (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override one config key, e.g. --set n_patients=500 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model: model.tham, train_log.jsonl, resolved.cfg.
    Train {
        /// Cohort JSONL (one patient object per line).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ontology edge list (child<TAB>parent per line).
        #[arg(long)]
        ontology: Option<PathBuf>,
        /// Config file of model keys (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override one config key, e.g. --set epochs=20 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Train an ablated variant: no_hierarchy, no_time_embed,
        /// no_comprehensive, or no_time_and_comp (repeatable).
        #[arg(long, value_name = "FLAG")]
        ablation: Vec<String>,
        /// Shorthand for --set seed=N.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the drug-code and code-code graph matrices as TSV.
        #[arg(long)]
        dump_graphs: bool,
    },
    /// Score checkpoints on a data split and print a JSON report.
    Evaluate {
        /// Checkpoint path; comma-separate several for mean/std across seeds.
        #[arg(long, value_delimiter = ',')]
        checkpoint: Vec<PathBuf>,
        /// Cohort JSONL to score against.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Partition to score: train, valid, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Recall cutoffs for the diagnosis task.
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 20, 40])]
        k: Vec<usize>,
        /// Assert the checkpoint task (diagnosis or heart_failure).
        #[arg(long)]
        task: Option<String>,
        /// Config file (split fractions, paths).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score one patient record and print JSON predictions.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// The patient as a JSON object (one cohort.jsonl line).
        #[arg(long)]
        patient: String,
        /// Number of codes to return (diagnosis task).
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Include the attention weights in the output.
        #[arg(long)]
        trace: bool,
    },
    /// Write graph-refined code and drug embeddings as one TSV file.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output TSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse arguments, dispatch, and map errors to the exit-code contract.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let matches = augmented_command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The derived command with per-subcommand config-key listings appended,
/// so `--help` documents every accepted key.
fn augmented_command() -> clap::Command {
    let keys = |base: &[&str], extra: &[&str]| {
        format!("Config keys: {}.", base.iter().chain(extra).copied().collect::<Vec<_>>().join(", "))
    };
    Cli::command()
        .mut_subcommand("generate", |c| {
            let help = keys(SYNTH_KEYS, &["out"]);
            c.after_help(help)
        })
        .mut_subcommand("train", |c| {
            let help = keys(MODEL_KEYS, &["data", "ontology", "out", "split"]);
            c.after_help(help)
        })
        .mut_subcommand("evaluate", |c| {
            let help = keys(MODEL_KEYS, RUN_KEYS);
            c.after_help(help)
        })
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out, set } => cmd_generate(config, out, &set),
        Command::Train {
            data,
            ontology,
            config,
            out,
            set,
            ablation,
            seed,
            dump_graphs,
        } => cmd_train(data, ontology, config, out, &set, &ablation, seed, dump_graphs),
        Command::Evaluate {
            checkpoint,
            data,
            split,
            k,
            task,
            config,
            set,
        } => cmd_evaluate(checkpoint, data, &split, &k, task.as_deref(), config, &set),
        Command::Predict { checkpoint, patient, k, trace } => {
            cmd_predict(&checkpoint, &patient, k, trace)
        }
        Command::ExportEmbeddings { checkpoint, out } => {
            cmd_export_embeddings(&checkpoint, &out)
        }
    }
}

// ---- configuration plumbing ----

/// Config file + `--set` overrides. An unreadable config file is a
/// configuration error, not an I/O failure.
fn load_raw(config: Option<&Path>, sets: &[String]) -> Result<RawConfig> {
    let mut raw = match config {
        Some(p) => RawConfig::from_file(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("config {}: {io}", p.display())),
            other => other,
        })?,
        None => RawConfig::empty(),
    };
    for kv in sets {
        raw.push_override(kv)?;
    }
    Ok(raw)
}

/// A path from its flag or the same-named config key.
fn require_path(flag: Option<PathBuf>, raw: &RawConfig, key: &str) -> Result<PathBuf> {
    flag.or_else(|| raw.get(key).map(PathBuf::from)).ok_or_else(|| {
        Error::Config(format!("missing --{key} (or a {key} config entry)"))
    })
}

fn split_fractions(raw: &RawConfig) -> Result<(f64, f64, f64)> {
    let Some(s) = raw.get("split") else {
        return Ok(DEFAULT_SPLIT);
    };
    let bad = || {
        Error::Config(format!(
            "split = {s:?}: expected three nonnegative fractions summing to 1, \
             e.g. 0.75,0.1,0.15"
        ))
    };
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    if parts.len() != 3 || parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(bad());
    }
    if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(bad());
    }
    Ok((parts[0], parts[1], parts[2]))
}

/// Valid/test sizes round down; train takes the remainder.
fn split_counts(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let n_valid = (fractions.1 * n as f64).floor() as usize;
    let n_test = (fractions.2 * n as f64).floor() as usize;
    (n - n_valid - n_test, n_valid, n_test)
}

fn allowed_keys(base: &[&'static str], extra: &[&'static str]) -> Vec<&'static str> {
    base.iter().chain(extra).copied().collect()
}

fn write_resolved(dir: &Path, map: &BTreeMap<String, String>) -> Result<()> {
    fs::write(dir.join("resolved.cfg"), render_map(map))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))
}

// ---- generate ----

fn cmd_generate(config: Option<PathBuf>, out: Option<PathBuf>, sets: &[String]) -> Result<()> {
    let raw = load_raw(config.as_deref(), sets)?;
    raw.reject_unknown(&allowed_keys(SYNTH_KEYS, &["out"]))?;
    let cfg = SynthConfig::from_raw(&raw)?;
    let out = require_path(out, &raw, "out")?;
    fs::create_dir_all(&out)?;

    let generated = synth::generate(&cfg)?;
    cohort::write_jsonl(&generated.cohort, out.join("cohort.jsonl"))?;
    crate::ontology::write_edge_list(out.join("ontology.tsv"), &generated.edges)?;
    fs::write(out.join("truth.json"), to_json(&generated.truth)? + "\n")?;

    let mut map = cfg.to_map();
    map.insert("out".into(), out.display().to_string());
    write_resolved(&out, &map)?;

    println!(
        "wrote {} patients, {} codes, {} drugs to {}",
        generated.cohort.patients.len(),
        generated.cohort.codes.len(),
        generated.cohort.drugs.len(),
        out.display()
    );
    Ok(())
}

// ---- train ----

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: Option<PathBuf>,
    ontology: Option<PathBuf>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    sets: &[String],
    ablations: &[String],
    seed: Option<u64>,
    dump_graphs: bool,
) -> Result<()> {
    let mut raw = load_raw(config.as_deref(), sets)?;
    if let Some(seed) = seed {
        raw.push_override(&format!("seed={seed}"))?;
    }
    for flag in ablations {
        if !ABLATIONS.contains(&flag.as_str()) {
            return Err(Error::Config(format!(
                "unknown ablation {flag:?} (expected one of {})",
                ABLATIONS.join(", ")
            )));
        }
        raw.push_override(&format!("{flag}=true"))?;
    }
    raw.reject_unknown(&allowed_keys(MODEL_KEYS, &["data", "ontology", "out", "split"]))?;

    let cfg = ModelConfig::from_raw(&raw)?;
    let data = require_path(data, &raw, "data")?;
    let out = require_path(out, &raw, "out")?;
    let ontology_path: Option<String> = ontology
        .map(|p| p.display().to_string())
        .or_else(|| raw.get("ontology").map(str::to_string));
    let fractions = split_fractions(&raw)?;

    let cohort = cohort::load_jsonl(&data)?;
    let examples = cohort::make_examples(&cohort, cfg.task);
    let counts = split_counts(examples.len(), fractions);
    let (train_ex, valid_ex, _test_ex) = cohort::split(&examples, counts, cfg.seed)?;

    // Co-occurrence statistics must not see held-out patients.
    let train_ids: Vec<String> = train_ex.iter().map(|e| e.patient_id.clone()).collect();
    let graphs = cograph::build_acc(&cohort.restricted_to(&train_ids), cfg.lambda)?;

    let tree = match (&ontology_path, cfg.no_hierarchy) {
        (Some(p), _) => Some(load_ontology(p, &cohort.codes, cfg.tree_depth)?),
        (None, true) => None,
        (None, false) => {
            return Err(Error::Config(
                "hierarchical embeddings need --ontology (or set no_hierarchy = true)".into(),
            ))
        }
    };

    let mut model = Tham::new(
        cfg.clone(),
        cohort.codes.clone(),
        cohort.drugs.clone(),
        tree,
        graphs,
    )?;

    fs::create_dir_all(&out)?;
    let mut map = cfg.to_map();
    map.insert("data".into(), data.display().to_string());
    if let Some(p) = &ontology_path {
        map.insert("ontology".into(), p.clone());
    }
    map.insert("out".into(), out.display().to_string());
    map.insert(
        "split".into(),
        format!("{},{},{}", fractions.0, fractions.1, fractions.2),
    );
    write_resolved(&out, &map)?;

    if dump_graphs {
        cograph::dump_matrix(&model.graphs.b_dc, out.join("b_dc.tsv"))?;
        cograph::dump_matrix(&model.graphs.a_cc, out.join("a_cc.tsv"))?;
    }

    log::info!(
        "training on {} examples (valid {}, test {}), |C|={}, |D|={}",
        train_ex.len(),
        valid_ex.len(),
        counts.2,
        cohort.codes.len(),
        cohort.drugs.len()
    );
    let mut log_w = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let outcome = fit(&mut model, &train_ex, &valid_ex, |entry| {
        if let Ok(line) = serde_json::to_string(entry) {
            let _ = writeln!(log_w, "{line}");
        }
        log::info!(
            "epoch {:>4}  train {:.6}  valid {:.6}  lr {}",
            entry.epoch,
            entry.train_loss,
            entry.valid_loss,
            entry.lr
        );
    })?;
    log_w.flush()?;

    let model_path = out.join("model.tham");
    checkpoint::save(&model, outcome.best_valid_loss, ontology_path.as_deref(), &model_path)?;
    println!(
        "best valid loss {:.6} at epoch {}; wrote {}",
        outcome.best_valid_loss,
        outcome.best_epoch,
        model_path.display()
    );
    Ok(())
}

// ---- evaluate ----

/// One example translated into a checkpoint's id space.
struct EvalCase {
    rows: Vec<Vec<usize>>,
    intervals: Vec<i64>,
    /// In-vocabulary target code ids (diagnosis).
    truth: Vec<u32>,
    /// Sorted distinct in-vocabulary history code ids.
    seen: Vec<u32>,
    flag: bool,
}

/// Translate via names: the evaluation cohort carries its own
/// vocabulary, the model only knows the one it was trained with.
fn remap_case(
    ex: &Example,
    from: &Vocab,
    model: &Tham,
    unk: &mut usize,
    dropped: &mut usize,
) -> EvalCase {
    let unk_ix = unk_row(model.codes.len());
    let mut seen = std::collections::BTreeSet::new();
    let mut rows = Vec::with_capacity(ex.history.len());
    for v in &ex.history {
        let mut row = Vec::with_capacity(v.codes.len());
        for &c in &v.codes {
            match model.codes.id(from.name(c)) {
                Some(id) => {
                    row.push(id as usize);
                    seen.insert(id);
                }
                None => {
                    *unk += 1;
                    row.push(unk_ix);
                }
            }
        }
        rows.push(row);
    }
    let (truth, flag) = match &ex.target {
        Target::Codes(codes) => {
            let mut truth = Vec::with_capacity(codes.len());
            for &c in codes {
                match model.codes.id(from.name(c)) {
                    Some(id) => truth.push(id),
                    None => *dropped += 1,
                }
            }
            (truth, false)
        }
        Target::Flag(f) => (Vec::new(), *f),
    };
    EvalCase {
        rows,
        intervals: ex.intervals.clone(),
        truth,
        seen: seen.into_iter().collect(),
        flag,
    }
}

/// Deterministic eval-phase predictions from the checkpoint's stored
/// features, then task-appropriate metrics.
fn score_cases(loaded: &Loaded, cases: &[EvalCase], ks: &[usize]) -> Result<(MetricSet, usize)> {
    let model = &loaded.model;
    let features = extend_features(&Tensor::constant(loaded.code_features.clone()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(model.config.seed);
    let width = match model.config.task {
        Task::Diagnosis => model.codes.len(),
        Task::HeartFailure => 1,
    };
    let mut pred = Array2::zeros((cases.len(), width));
    for (i, case) in cases.iter().enumerate() {
        let probs =
            model.forward_patient(&features, &case.rows, &case.intervals, &mut rng, Phase::Eval)?;
        pred.row_mut(i).assign(&probs.values().row(0));
    }

    let mut set = MetricSet::default();
    let mut skipped = 0;
    match model.config.task {
        Task::Diagnosis => {
            let truth: Vec<Vec<u32>> = cases.iter().map(|c| c.truth.clone()).collect();
            if truth.iter().all(|t| t.is_empty()) {
                return Err(Error::Config(
                    "no in-vocabulary target codes in the evaluation split".into(),
                ));
            }
            let seen: Vec<Vec<u32>> = cases.iter().map(|c| c.seen.clone()).collect();
            let has_occurred = cases
                .iter()
                .any(|c| c.truth.iter().any(|t| c.seen.binary_search(t).is_ok()));
            let has_emerging = cases
                .iter()
                .any(|c| c.truth.iter().any(|t| c.seen.binary_search(t).is_err()));
            set.w_f1 = Some(weighted_f1(&pred, &truth)?);
            for &k in ks {
                let r = recall_at_k(&pred, &truth, k)?;
                skipped = r.skipped;
                set.r_at.insert(k.to_string(), r.mean);
                if has_occurred && has_emerging {
                    let (occ, eme) = occurred_emerging_recall(&pred, &truth, &seen, k)?;
                    set.r_at_occurred.insert(k.to_string(), occ.mean);
                    set.r_at_emerging.insert(k.to_string(), eme.mean);
                }
            }
            if !(has_occurred && has_emerging) {
                log::warn!(
                    "every example's target is all-{} codes; omitting the \
                     occurred/emerging recall breakdown",
                    if has_emerging { "new" } else { "repeat" }
                );
            }
        }
        Task::HeartFailure => {
            let scores: Vec<f64> = pred.column(0).to_vec();
            let labels: Vec<bool> = cases.iter().map(|c| c.flag).collect();
            let positives = labels.iter().filter(|&&b| b).count();
            if positives == 0 || positives == labels.len() {
                log::warn!("single-class split: AUC undefined, reporting F1 only");
            } else {
                set.auc = Some(auc(&scores, &labels)?);
            }
            set.f1 = Some(binary_f1(&scores, &labels, 0.5));
        }
    }
    Ok((set, skipped))
}

fn cmd_evaluate(
    checkpoints: Vec<PathBuf>,
    data: Option<PathBuf>,
    split_name: &str,
    ks: &[usize],
    expect_task: Option<&str>,
    config: Option<PathBuf>,
    sets: &[String],
) -> Result<()> {
    let raw = load_raw(config.as_deref(), sets)?;
    raw.reject_unknown(&allowed_keys(MODEL_KEYS, RUN_KEYS))?;
    let data = require_path(data, &raw, "data")?;
    let mut checkpoints = checkpoints;
    if checkpoints.is_empty() {
        if let Some(s) = raw.get("checkpoint") {
            checkpoints = s.split(',').map(|p| PathBuf::from(p.trim())).collect();
        }
    }
    if checkpoints.is_empty() {
        return Err(Error::Config("missing --checkpoint (or a checkpoint config entry)".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("--k needs positive cutoffs".into()));
    }
    let expect_task = expect_task.map(Task::parse).transpose()?;
    let fractions = split_fractions(&raw)?;
    let cohort = cohort::load_jsonl(&data)?;

    let mut task: Option<Task> = None;
    let mut runs = Vec::with_capacity(checkpoints.len());
    let mut examples_n = 0;
    let mut skipped_total = 0;
    let mut unk = 0;
    let mut dropped = 0;
    for path in &checkpoints {
        let loaded = checkpoint::load(path)?;
        let t = loaded.model.config.task;
        if let Some(expect) = expect_task {
            if expect != t {
                return Err(Error::Config(format!(
                    "{} was trained for {}, not {}",
                    path.display(),
                    t.as_str(),
                    expect.as_str()
                )));
            }
        }
        match task {
            None => task = Some(t),
            Some(t0) if t0 != t => {
                return Err(Error::Config(format!(
                    "checkpoints mix tasks: {} is {}, earlier ones are {}",
                    path.display(),
                    t.as_str(),
                    t0.as_str()
                )))
            }
            Some(_) => {}
        }

        // Each checkpoint partitions by its own training seed.
        let examples = cohort::make_examples(&cohort, t);
        let counts = split_counts(examples.len(), fractions);
        let (train_ex, valid_ex, test_ex) =
            cohort::split(&examples, counts, loaded.model.config.seed)?;
        let chosen = match split_name {
            "train" => train_ex,
            "valid" => valid_ex,
            "test" => test_ex,
            other => {
                return Err(Error::Config(format!(
                    "unknown split {other:?} (expected train, valid, or test)"
                )))
            }
        };
        if chosen.is_empty() {
            return Err(Error::Config(format!(
                "the {split_name} split is empty ({} examples at fractions {},{},{})",
                examples.len(),
                fractions.0,
                fractions.1,
                fractions.2
            )));
        }
        let cases: Vec<EvalCase> = chosen
            .iter()
            .map(|ex| remap_case(ex, &cohort.codes, &loaded.model, &mut unk, &mut dropped))
            .collect();
        examples_n = cases.len();
        let (set, skipped) = score_cases(&loaded, &cases, ks)?;
        skipped_total += skipped;
        runs.push(set);
    }
    if unk > 0 {
        log::warn!("{unk} history code occurrences were outside the model vocabulary (mapped to UNK)");
    }
    if dropped > 0 {
        log::warn!("{dropped} target code occurrences were outside the model vocabulary (dropped from true sets)");
    }

    let report = EvalReport::from_runs(
        task.expect("at least one checkpoint").as_str(),
        runs,
        examples_n,
        skipped_total,
    )?;
    println!("{}", to_json(&report)?);
    Ok(())
}

// ---- predict ----

#[derive(Serialize)]
struct Prediction {
    code: String,
    probability: f64,
}

#[derive(Serialize)]
struct PredictOut<'a> {
    patient_id: &'a str,
    task: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    probability: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    predictions: Vec<Prediction>,
    warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<AttentionTrace>,
}

fn cmd_predict(checkpoint: &Path, patient: &str, k: usize, want_trace: bool) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("--k must be positive".into()));
    }
    let loaded = checkpoint::load(checkpoint)?;
    let model = &loaded.model;
    let record = cohort::parse_patient_line(patient)?;

    let unk_ix = unk_row(model.codes.len());
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(record.visits.len());
    for (_, codes, _) in &record.visits {
        let mut row = Vec::with_capacity(codes.len());
        for code in codes {
            match model.codes.id(code) {
                Some(id) => row.push(id as usize),
                None => {
                    warnings.push(format!("unknown code {code:?} mapped to UNK"));
                    row.push(unk_ix);
                }
            }
        }
        rows.push(row);
    }

    let features = extend_features(&Tensor::constant(loaded.code_features.clone()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(model.config.seed);
    let (probs, trace) = if want_trace {
        let (p, t) =
            model.trace_patient(&features, &rows, &record.intervals, &mut rng, Phase::Eval)?;
        (p, Some(t))
    } else {
        let p =
            model.forward_patient(&features, &rows, &record.intervals, &mut rng, Phase::Eval)?;
        (p, None)
    };

    let mut out = PredictOut {
        patient_id: &record.id,
        task: model.config.task.as_str(),
        probability: None,
        predictions: Vec::new(),
        warnings,
        trace,
    };
    match model.config.task {
        Task::Diagnosis => {
            out.predictions = predict_topk(&probs, k)
                .into_iter()
                .map(|(id, p)| Prediction {
                    code: model.codes.name(id).to_string(),
                    probability: p,
                })
                .collect();
        }
        Task::HeartFailure => out.probability = Some(probs.item()),
    }
    println!("{}", to_json(&out)?);
    Ok(())
}

// ---- export-embeddings ----

fn cmd_export_embeddings(checkpoint: &Path, out: &Path) -> Result<()> {
    let loaded = checkpoint::load(checkpoint)?;
    let mut w = BufWriter::new(File::create(out)?);
    for (kind, names, feats) in [
        ("code", loaded.model.codes.names(), &loaded.code_features),
        ("drug", loaded.model.drugs.names(), &loaded.drug_features),
    ] {
        for (i, name) in names.iter().enumerate() {
            write!(w, "{kind}\t{name}")?;
            for v in feats.row(i) {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    println!(
        "wrote {} code and {} drug embeddings to {}",
        loaded.model.codes.len(),
        loaded.model.drugs.len(),
        out.display()
    );
    Ok(())
}
