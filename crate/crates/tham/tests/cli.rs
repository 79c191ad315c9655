//! End-to-end checks of the command-line file contracts: artifact
//! layout, exit codes, determinism, and resolved.cfg reproduction.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tham(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tham"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tham(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    tham(args).status.code().expect("no signal")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Generate a small cohort into `dir` and return its file paths.
fn small_cohort(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    ok(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--set",
        "n_patients=40",
        "--set",
        "seed=11",
    ]);
    (
        data.join("cohort.jsonl").to_str().unwrap().to_string(),
        data.join("ontology.tsv").to_str().unwrap().to_string(),
    )
}

/// Train a tiny heart-failure model; returns the checkpoint path.
fn small_hf_run(dir: &Path, cohort: &str, ontology: &str, out_name: &str) -> String {
    let out = dir.join(out_name);
    ok(&[
        "train",
        "--data",
        cohort,
        "--ontology",
        ontology,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "task=heart_failure",
        "--set",
        "epochs=2",
    ]);
    out.join("model.tham").to_str().unwrap().to_string()
}

#[test]
fn generate_is_deterministic_and_writes_the_contracted_files() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&[
            "generate",
            "--out",
            dir.to_str().unwrap(),
            "--set",
            "n_patients=25",
            "--set",
            "seed=3",
        ]);
    }
    for name in ["cohort.jsonl", "ontology.tsv", "truth.json", "resolved.cfg"] {
        assert!(a.join(name).exists(), "missing {name}");
        if name == "resolved.cfg" {
            continue; // differs in its out= line by construction
        }
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical seeds"
        );
    }
}

#[test]
fn train_artifacts_and_resolved_config_reproduce_bit_identically() {
    let tmp = TempDir::new().unwrap();
    let (cohort, ontology) = small_cohort(tmp.path());
    let first = small_hf_run(tmp.path(), &cohort, &ontology, "run1");
    let run1 = tmp.path().join("run1");
    for name in ["model.tham", "train_log.jsonl", "resolved.cfg"] {
        assert!(run1.join(name).exists(), "missing {name}");
    }
    // every train_log line carries the contracted fields
    let log = fs::read_to_string(run1.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for field in ["epoch", "train_loss", "valid_loss", "lr"] {
            assert!(v.get(field).is_some(), "log line misses {field}");
        }
    }

    // the resolved config alone reproduces the run
    let run2 = tmp.path().join("run2");
    ok(&[
        "train",
        "--config",
        run1.join("resolved.cfg").to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(&first).unwrap(),
        fs::read(run2.join("model.tham")).unwrap(),
        "checkpoint bytes differ when replayed from resolved.cfg"
    );
    assert_eq!(
        fs::read(run1.join("train_log.jsonl")).unwrap(),
        fs::read(run2.join("train_log.jsonl")).unwrap()
    );
}

#[test]
fn evaluate_reports_task_metrics_deterministically() {
    let tmp = TempDir::new().unwrap();
    let (cohort, ontology) = small_cohort(tmp.path());
    let ckpt = small_hf_run(tmp.path(), &cohort, &ontology, "run");
    let args = ["evaluate", "--checkpoint", &ckpt, "--data", &cohort, "--split", "test"];
    let report = stdout_json(&ok(&args));
    assert_eq!(report["task"], "heart_failure");
    assert!(report["metrics"]["f1"].is_number());
    assert!(report["examples"].as_u64().unwrap() > 0);
    assert!(report["metrics"].get("r_at").is_none(), "HF report carries recall keys");
    // byte-identical on a second run
    assert_eq!(ok(&args).stdout, ok(&args).stdout);
}

#[test]
fn evaluate_rejects_a_task_mismatch_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let (cohort, ontology) = small_cohort(tmp.path());
    let ckpt = small_hf_run(tmp.path(), &cohort, &ontology, "run");
    assert_eq!(
        exit_code(&[
            "evaluate",
            "--checkpoint",
            &ckpt,
            "--data",
            &cohort,
            "--task",
            "diagnosis"
        ]),
        2
    );
}

#[test]
fn predict_orders_probabilities_and_warns_on_unknown_codes() {
    let tmp = TempDir::new().unwrap();
    let (cohort, ontology) = small_cohort(tmp.path());
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--data",
        &cohort,
        "--ontology",
        &ontology,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "epochs=1",
        "--set",
        "m_c=2",
        "--set",
        "m_d=3",
        "--set",
        "gnn_code_dims=8,8",
        "--set",
        "gnn_drug_dims=4,4",
        "--set",
        "a=4",
        "--set",
        "q=4",
        "--set",
        "b=4",
        "--set",
        "ffn_size=16",
        "--set",
        "heads=2",
    ]);
    let ckpt = out.join("model.tham");
    let patient = r#"{"patient_id":"q","visits":[{"admit_day":0,"codes":["4280","mystery"],"drugs":[]},{"admit_day":30,"codes":["4281"],"drugs":[]}]}"#;
    let v = stdout_json(&ok(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--patient",
        patient,
        "--k",
        "5",
        "--trace",
    ]));
    assert_eq!(v["task"], "diagnosis");
    let preds = v["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), 5);
    let probs: Vec<f64> = preds.iter().map(|p| p["probability"].as_f64().unwrap()).collect();
    assert!(probs.windows(2).all(|w| w[0] >= w[1]), "not descending: {probs:?}");
    let warnings = v["warnings"].as_array().unwrap();
    assert!(
        warnings.iter().any(|w| w.as_str().unwrap().contains("mystery")),
        "no UNK warning: {warnings:?}"
    );
    let alpha: f64 =
        v["trace"]["alpha"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((alpha - 1.0).abs() < 1e-9, "alpha sums to {alpha}");
}

#[test]
fn export_embeddings_writes_one_row_per_code_and_drug() {
    let tmp = TempDir::new().unwrap();
    let (cohort, ontology) = small_cohort(tmp.path());
    let ckpt = small_hf_run(tmp.path(), &cohort, &ontology, "run");
    let tsv = tmp.path().join("emb.tsv");
    ok(&["export-embeddings", "--checkpoint", &ckpt, "--out", tsv.to_str().unwrap()]);
    let text = fs::read_to_string(&tsv).unwrap();
    let codes = text.lines().filter(|l| l.starts_with("code\t")).count();
    let drugs = text.lines().filter(|l| l.starts_with("drug\t")).count();
    assert_eq!((codes, drugs), (48, 16));
    // heart-failure defaults: 28-wide code features, 16-wide drug features
    let first = text.lines().next().unwrap();
    assert_eq!(first.split('\t').count(), 2 + 28, "code row width");
    let first_drug = text.lines().find(|l| l.starts_with("drug\t")).unwrap();
    assert_eq!(first_drug.split('\t').count(), 2 + 16, "drug row width");
    for cell in first.split('\t').skip(2) {
        cell.parse::<f64>().expect("numeric cell");
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = TempDir::new().unwrap();
    let (cohort, ontology) = small_cohort(tmp.path());
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();

    // 2: config problems
    assert_eq!(exit_code(&["generate", "--config", "/nonexistent.cfg", "--out", out]), 2);
    assert_eq!(exit_code(&["generate", "--out", out, "--set", "bogus=1"]), 2);
    assert_eq!(
        exit_code(&[
            "train", "--data", &cohort, "--ontology", &ontology, "--out", out, "--ablation",
            "bogus"
        ]),
        2
    );
    // missing required path is a config problem too
    assert_eq!(exit_code(&["train", "--ontology", &ontology, "--out", out]), 2);

    // 3: numeric failure (overflowing learning rate poisons the loss)
    assert_eq!(
        exit_code(&[
            "train",
            "--data",
            &cohort,
            "--ontology",
            &ontology,
            "--out",
            out,
            "--set",
            "task=heart_failure",
            "--set",
            "epochs=2",
            "--set",
            "lr=1e300",
        ]),
        3
    );

    // 4: unreadable data is I/O
    assert_eq!(
        exit_code(&["train", "--data", "/nonexistent.jsonl", "--ontology", &ontology, "--out", out]),
        4
    );
}
