mod common;

use std::path::Path;
use std::process::{Command, Output};

fn sage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sage")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn config_with_base(dir: &Path) -> String {
    let model = dir.join("base.json");
    common::base_model().save(&model).unwrap();
    let cfg = dir.join("sage.toml");
    std::fs::write(&cfg, format!("[learner]\nbase_path = {:?}\n", model.to_str().unwrap())).unwrap();
    cfg.to_str().unwrap().to_owned()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&sage(&[])), 1);
    assert_eq!(code(&sage(&["frobnicate"])), 1);
    assert_eq!(code(&sage(&["gen-tasks", "--kind", "nope", "--n", "3"])), 1);
    assert_eq!(code(&sage(&["gen-tasks", "--kind", "add", "--n", "0"])), 1);
    assert_eq!(code(&sage(&["--help"])), 0);
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[trigger]\nthreshold = 2.0\n").unwrap();
    let input = dir.path().join("in.jsonl");
    std::fs::write(&input, "").unwrap();
    let out = sage(&["run", "--input", input.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_input_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let good = r#"{"question":"What is 1 plus 2?","full prompt":"Q","real-answer":"3","label":0}"#;
    std::fs::write(&input, format!("{good}\n{{not json\n")).unwrap();
    let out = sage(&["run", "--input", input.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
    let missing = sage(&["run", "--input", "/nonexistent/in.jsonl", "--out", "o"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn gen_tasks_writes_jsonl() {
    let out = sage(&["gen-tasks", "--kind", "two_step", "--n", "5", "--seed", "3"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let samples = sage::sample::read_jsonl_from(text.as_bytes(), "stdout").unwrap();
    assert_eq!(samples.len(), 5);
    assert!(samples.iter().all(|s| s.label == Some(1)));
}

#[test]
fn run_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with_base(dir.path());
    let data = dir.path().join("data");
    let gen = sage(&[
        "gen-stream",
        "--per-template",
        "20",
        "--id-samples",
        "6",
        "--holdout-per-template",
        "5",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&gen), 0);
    let report = dir.path().join("report");
    let out = sage(&[
        "run",
        "--input",
        data.join("stream.jsonl").to_str().unwrap(),
        "--holdout",
        data.join("holdout.jsonl").to_str().unwrap(),
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "trace.csv", "clusters.csv", "embeddings.csv", "buffer.json"] {
        assert!(report.join(f).exists(), "{f}");
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 5);
    assert_eq!(json["n_samples"], 66);
    assert!(json["config_text"].as_str().unwrap().contains("base_path"));

    let sweep = dir.path().join("sweep");
    let out = sage(&["sweep", "--kind", "threshold", "--config", &cfg, "--step", "0.25", "--out", sweep.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(sweep.join("sweep_threshold.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}
