use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn thermdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermdet"))
        .args(args)
        .env_remove("THERMDET_SEED")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const GT: &str = r#"{
  "images": [{"id": 1, "width": 640, "height": 512}],
  "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 20, 100, 50]}],
  "categories": [{"id": 1, "name": "car"}]
}"#;

const DET: &str = r#"[{"image_id": 1, "category_id": 1, "bbox": [10, 20, 100, 50], "score": 0.9}]"#;

#[test]
fn eval_single_true_positive_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write(dir.path(), "gt.json", GT);
    let det = write(dir.path(), "det.json", DET);
    let out = thermdet(&["eval", "--gt", &gt, "--det", &det]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["map_50"].as_f64(), Some(1.0));

    let out = thermdet(&["eval", "--gt", &gt, "--det", &det, "--sweep"]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["map_sweep"].as_f64(), Some(1.0));
}

#[test]
fn eval_writes_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write(dir.path(), "gt.json", GT);
    let det = write(dir.path(), "det.json", "[]");
    let report = dir.path().join("report.json");
    let out = thermdet(&["eval", "--gt", &gt, "--det", &det, "--out", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["map_50"].as_f64(), Some(0.0));
}

#[test]
fn malformed_json_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write(dir.path(), "gt.json", "{\n  \"images\": [\n    {\"id\": 1,,}\n  ]\n}");
    let det = write(dir.path(), "det.json", DET);
    let out = thermdet(&["eval", "--gt", &gt, "--det", &det]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("schema error:"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn negative_box_size_is_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write(dir.path(), "gt.json", &GT.replace("[10, 20, 100, 50]", "[10, 20, -5, 50]"));
    let det = write(dir.path(), "det.json", DET);
    let out = thermdet(&["eval", "--gt", &gt, "--det", &det]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("schema error:"));
}

#[test]
fn missing_file_is_io_error() {
    let out = thermdet(&["eval", "--gt", "/nonexistent/gt.json", "--det", "/nonexistent/d.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("io error:"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = thermdet(&["gradcheck", "--loss", "ciou", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("usage error:"));

    let out = thermdet(&["gradcheck", "--loss", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = thermdet(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck"));
}

#[test]
fn gradcheck_ciou_passes() {
    let out = thermdet(&["gradcheck", "--loss", "ciou", "--trials", "100", "--seed", "42"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = stdout_json(&out);
    assert_eq!(v["trials"].as_u64(), Some(100));
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-5);
}

#[test]
fn gradcheck_impossible_tolerance_is_verification_failure() {
    let out = thermdet(&["gradcheck", "--loss", "contrastive", "--trials", "3", "--tol", "1e-30"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).starts_with("verification failure:"));
}

#[test]
fn match_two_by_two() {
    let dir = tempfile::tempdir().unwrap();
    let cost = write(dir.path(), "cost.csv", "1,2\n2,1\n");
    let out = thermdet(&["match", "--cost", &cost, "--oracle"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = stdout_json(&out);
    assert_eq!(v["total_cost"].as_f64(), Some(2.0));
    let pairs: Vec<(u64, u64)> = v["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p["query"].as_u64().unwrap(), p["target"].as_u64().unwrap()))
        .collect();
    assert_eq!(pairs, vec![(0, 0), (1, 1)]);
}

#[test]
fn match_rejects_non_numeric_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cost = write(dir.path(), "cost.csv", "1,x\n2,1\n");
    let out = thermdet(&["match", "--cost", &cost]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("row 1 column 2"));
}

#[test]
fn training_output_is_deterministic_across_execution_modes() {
    let args = ["train", "boxes", "--steps", "60", "--trials", "8", "--seed", "5"];
    let a = thermdet(&args);
    let b = thermdet(&args);
    let mut seq_args = args.to_vec();
    seq_args.push("--sequential");
    let c = thermdet(&seq_args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("step,loss,metric\n"));
}

#[test]
fn train_writes_csv_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("log.csv");
    let svg = dir.path().join("log.svg");
    let out = thermdet(&[
        "train",
        "contrastive",
        "--steps",
        "20",
        "--n-scenes",
        "16",
        "--out",
        csv.to_str().unwrap(),
        "--plot",
        svg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["task"], "contrastive");
    let log = fs::read_to_string(csv).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    assert!(fs::read_to_string(svg).unwrap().contains("<polyline"));
}

#[test]
fn env_seed_overrides_default() {
    let run = |seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_thermdet"));
        cmd.args(["synth", "--kind", "scenes"]).env_remove("THERMDET_SEED");
        if let Some(s) = seed {
            cmd.env("THERMDET_SEED", s);
        }
        cmd.output().unwrap()
    };
    let default = run(None);
    let env = run(Some("9"));
    let explicit = thermdet(&["synth", "--kind", "scenes", "--seed", "9"]);
    assert_ne!(default.stdout, env.stdout);
    assert_eq!(env.stdout, explicit.stdout);
    assert_eq!(stdout_json(&env)["seed"].as_u64(), Some(9));
}

#[test]
fn invalid_config_value_is_usage_error() {
    let out = thermdet(&["train", "contrastive", "--tau", "0", "--steps", "2"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("usage error:"));
}
