//! Drives the compiled binary end to end: generate → train → evaluate →
//! reports on a small corpus, plus the exit-code contract (0 ok, 1 bad
//! input, 2 runtime abort).

use std::path::Path;
use std::process::{Command, Output};

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpsvi"))
        .current_dir(dir)
        .args(args)
        .env_remove("GPSVI_SEED")
        .output()
        .expect("binary should spawn")
}

fn assert_exit(out: &Output, code: i32, ctx: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{ctx}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).expect("test fixture write");
}

const SYNTH: &str = r#"{
  "n_users": 80, "n_items": 40, "n_groups": 4, "n_contexts": 2,
  "zipf_exponent": 1.2, "max_seq_len": 12, "latent_dim": 6,
  "group_strength": 2.0, "history_strength": 2.0, "label_noise": 0.1,
  "bias": 0.0, "length_scale": 6.0, "idiosyncrasy": 0.5,
  "train_impressions": 2, "eval_impressions": 1
}"#;

fn train_config(train: &str, eval: &str) -> String {
    format!(
        r#"{{
  "model": {{ "variant": "gpsvi", "d": 4, "k_flow": 1 }},
  "train": {{ "lr": 0.005, "beta": 0.3, "beta_warmup": true,
              "lambda_m": 0.1, "batch_size": 16, "epochs": 1, "repeats": 1 }},
  "data": {{ "train_path": "{train}", "eval_path": "{eval}", "max_seq_len": 12 }},
  "seeds": {{ "init": 7, "data": 8, "noise": 9 }}
}}"#
    )
}

#[test]
fn pipeline_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(&dir.join("synth.json"), SYNTH);

    let out = run_in(
        dir,
        &["generate-data", "--config", "synth.json", "--seed", "11", "--out", "data"],
    );
    assert_exit(&out, 0, "generate-data");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("data/manifest.json")).unwrap())
            .unwrap();
    for split in ["train", "eval"] {
        let file = dir.join("data").join(format!("{split}.jsonl"));
        let lines = std::fs::read_to_string(&file).unwrap().lines().count();
        let recorded = manifest["splits"][split]["records"].as_u64().unwrap() as usize;
        assert_eq!(lines, recorded, "manifest record count for {split}");
    }

    write(
        &dir.join("run.json"),
        &train_config("data/train.jsonl", "data/eval.jsonl"),
    );
    let out = run_in(dir, &["train", "--config", "run.json", "--out", "run"]);
    assert_exit(&out, 0, "train");
    for artifact in ["run_config.json", "checkpoint.json", "metrics.json"] {
        assert!(dir.join("run").join(artifact).is_file(), "missing {artifact}");
    }

    // Re-evaluating the same checkpoint on the same data must reproduce the
    // report byte for byte.
    for eval_dir in ["e1", "e2"] {
        let out = run_in(
            dir,
            &[
                "evaluate",
                "--checkpoint",
                "run/checkpoint.json",
                "--data",
                "data/eval.jsonl",
                "--out",
                eval_dir,
            ],
        );
        assert_exit(&out, 0, "evaluate");
    }
    let m1 = std::fs::read(dir.join("e1/metrics.json")).unwrap();
    let m2 = std::fs::read(dir.join("e2/metrics.json")).unwrap();
    assert!(!m1.is_empty() && m1 == m2, "evaluate reruns must be byte-identical");

    let out = run_in(
        dir,
        &[
            "report",
            "variance",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "data/eval.jsonl",
            "--out",
            "var",
            "--bins",
            "4",
        ],
    );
    assert_exit(&out, 0, "report variance");
    let csv = std::fs::read_to_string(dir.join("var/variance_report.csv")).unwrap();
    assert!(csv.starts_with("bin_lo,"), "variance csv header, got: {csv}");
    assert!(csv.lines().count() >= 2, "variance csv should have data rows");

    let out = run_in(
        dir,
        &[
            "report",
            "sensitivity",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "data/eval.jsonl",
            "--out",
            "sens",
        ],
    );
    assert_exit(&out, 0, "report sensitivity");
    assert!(dir.join("sens/sensitivity.csv").is_file());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["train", "--frobnicate"]);
    assert_exit(&out, 1, "unknown flag");
    let stderr = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(stderr.contains("usage"), "expected usage text, got: {stderr}");
}

#[test]
fn malformed_config_reports_line_and_column() {
    let tmp = tempfile::tempdir().unwrap();
    // Comma after the opening brace is illegal JSON; the error is on line 2.
    write(&tmp.path().join("bad.json"), "{\n  \"model\": {,}\n}\n");
    let out = run_in(tmp.path(), &["train", "--config", "bad.json", "--out", "run"]);
    assert_exit(&out, 1, "malformed config");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.json:2:"), "expected line/column, got: {stderr}");
}

#[test]
fn invalid_config_value_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = train_config("x.jsonl", "y.jsonl").replace("\"d\": 4", "\"d\": 0");
    write(&tmp.path().join("run.json"), &cfg);
    let out = run_in(tmp.path(), &["train", "--config", "run.json", "--out", "run"]);
    assert_exit(&out, 1, "invalid value");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("model.d"), "expected validation message, got: {stderr}");
}

#[test]
fn seed_env_var_overrides_config_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(&dir.join("synth.json"), SYNTH);
    assert_exit(
        &run_in(dir, &["generate-data", "--config", "synth.json", "--seed", "11", "--out", "data"]),
        0,
        "generate-data",
    );
    write(&dir.join("run.json"), &train_config("data/train.jsonl", "data/eval.jsonl"));
    let out = Command::new(env!("CARGO_BIN_EXE_gpsvi"))
        .current_dir(dir)
        .args(["train", "--config", "run.json", "--out", "run"])
        .env("GPSVI_SEED", "42")
        .output()
        .expect("binary should spawn");
    assert_exit(&out, 0, "train with seed override");
    let effective: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/run_config.json")).unwrap())
            .unwrap();
    assert_eq!(effective["seeds"]["init"], 42);
    assert_eq!(effective["seeds"]["data"], 43);
    assert_eq!(effective["seeds"]["noise"], 44);
}

#[test]
fn divergent_training_aborts_with_runtime_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // An absurd learning rate drives the logits to overflow within a few
    // steps; the trainer must stop with the runtime-abort code, not panic.
    let cfg = format!(
        r#"{{
  "model": {{ "variant": "dnn", "d": 4 }},
  "train": {{ "lr": 1e150, "batch_size": 16, "epochs": 1, "repeats": 1 }},
  "data": {{ "synthetic": {synth}, "max_seq_len": 12 }},
  "seeds": {{ "init": 7, "data": 8, "noise": 9 }}
}}"#,
        synth = SYNTH
    );
    write(&dir.join("run.json"), &cfg);
    let out = run_in(dir, &["train", "--config", "run.json", "--out", "run"]);
    assert_exit(&out, 2, "divergent training");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("non-finite"), "expected abort message, got: {stderr}");
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["selftest"]);
    assert_exit(&out, 0, "selftest");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "expected PASS lines, got: {stdout}");
    assert!(!stdout.contains("FAIL"), "selftest reported a failure: {stdout}");
}
