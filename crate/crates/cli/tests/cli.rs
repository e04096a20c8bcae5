//! End-to-end tests driving the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hieradv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// gen-tree + gen-data + train for a (2,2) tree; returns (tree, data, model).
fn build_pipeline(dir: &Path, train_extra: &[&str]) -> (String, String, String) {
    let tree = path_str(&dir.join("tree.json"));
    let data = path_str(&dir.join("data"));
    let model = path_str(&dir.join("model.json"));
    let out = run(&["gen-tree", "--branching", "2,2", "--out", &tree]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "gen-data", "--tree", &tree, "--dim", "8", "--sigma-levels", "0.3,0.1",
        "--noise", "0.02", "--samples", "30", "--seed", "1", "--out-dir", &data,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut args = vec![
        "train", "--data", &data, "--tree", &tree, "--iters", "150",
        "--lr", "1e-2", "--seed", "5", "--out", &model,
    ];
    args.extend_from_slice(train_extra);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (tree, data, model)
}

#[test]
fn validate_tree_prints_level_sizes_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let tree = path_str(&dir.path().join("tree.json"));
    let out = run(&["gen-tree", "--branching", "2,2,2", "--out", &tree]);
    assert!(out.status.success());
    let out = run(&["validate-tree", "--tree", &tree]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("[8,4,2,1]"), "stdout: {stdout}");
}

#[test]
fn gha_at_height_one_and_pgd_write_byte_identical_records() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, model) = build_pipeline(dir.path(), &[]);
    let pgd = path_str(&dir.path().join("pgd.json"));
    let gha = path_str(&dir.path().join("gha.json"));
    let out = run(&[
        "attack", "--model", &model, "--data", &data, "--attack", "PGD",
        "--steps", "10", "--seed", "7", "--out", &pgd,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "attack", "--model", &model, "--data", &data, "--attack", "GHA", "--h", "1",
        "--steps", "10", "--seed", "7", "--out", &gha,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&pgd).unwrap(), fs::read(&gha).unwrap());
}

#[test]
fn rational_and_decimal_budgets_parse_to_the_same_value() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, model) = build_pipeline(dir.path(), &[]);
    let a = path_str(&dir.path().join("a.json"));
    let b = path_str(&dir.path().join("b.json"));
    let out = run(&[
        "attack", "--model", &model, "--data", &data, "--attack", "PGD",
        "--eps", "8/255", "--steps", "5", "--seed", "3", "--out", &a,
    ]);
    assert!(out.status.success());
    let out = run(&[
        "attack", "--model", &model, "--data", &data, "--attack", "PGD",
        "--eps", "0.03137254901960784", "--steps", "5", "--seed", "3", "--out", &b,
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn bench_default_suite_on_a_four_level_tree_has_seven_records() {
    let dir = tempfile::tempdir().unwrap();
    let tree = path_str(&dir.path().join("tree.json"));
    let data = path_str(&dir.path().join("data"));
    let model = path_str(&dir.path().join("model.json"));
    let report = path_str(&dir.path().join("report.json"));
    let csv = path_str(&dir.path().join("report.csv"));
    assert!(run(&["gen-tree", "--branching", "2,2,2", "--out", &tree]).status.success());
    assert!(run(&[
        "gen-data", "--tree", &tree, "--dim", "8", "--sigma-levels", "0.4,0.2,0.1",
        "--noise", "0.02", "--samples", "16", "--seed", "2", "--out-dir", &data,
    ])
    .status
    .success());
    assert!(run(&[
        "train", "--data", &data, "--tree", &tree, "--iters", "100",
        "--lr", "1e-2", "--seed", "4", "--out", &model,
    ])
    .status
    .success());
    let out = run(&[
        "bench", "--model", &model, "--data", &data, "--suite", "default",
        "--steps", "5", "--seed", "6", "--out", &report, "--csv", &csv,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["records"].as_array().unwrap().len(), 7);
    assert!(parsed["summary"]["robust_accuracy"].is_number());
    let csv_text = fs::read_to_string(&csv).unwrap();
    assert_eq!(csv_text.lines().count(), 8);
    assert!(csv_text.starts_with("kind,h,eps,alpha,steps,"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, model) = build_pipeline(dir.path(), &["--trainer", "fat", "--curriculum", "chat"]);
    let r1 = path_str(&dir.path().join("r1.json"));
    let r2 = path_str(&dir.path().join("r2.json"));
    for (workers, out_path) in [("1", &r1), ("4", &r2)] {
        let out = run(&[
            "bench", "--model", &model, "--data", &data, "--steps", "10",
            "--seed", "9", "--workers", workers, "--out", out_path,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
}

#[test]
fn machine_output_goes_to_stdout_and_chatter_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, model) = build_pipeline(dir.path(), &[]);
    let out = run(&[
        "attack", "--model", &model, "--data", &data, "--attack", "PGD",
        "--steps", "5", "--seed", "3",
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let record: serde_json::Value = serde_json::from_str(&stdout).expect("stdout is pure JSON");
    assert_eq!(record["convention"], "worst-iterate");
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, model) = build_pipeline(dir.path(), &[]);
    // Unknown flag.
    let out = run(&["validate-tree", "--tree", "x.json", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    // Unknown attack kind.
    let out = run(&["attack", "--model", &model, "--data", &data, "--attack", "FOO"]);
    assert_eq!(out.status.code(), Some(1));
    // LHA requires a height >= 1.
    let out = run(&["attack", "--model", &model, "--data", &data, "--attack", "LHA"]);
    assert_eq!(out.status.code(), Some(1));
    // Zero branching factor.
    let tree = path_str(&dir.path().join("bad.json"));
    let out = run(&["gen-tree", "--branching", "2,0", "--out", &tree]);
    assert_eq!(out.status.code(), Some(1));
    // Malformed tree content is a validation error, not an I/O error.
    let garbled = dir.path().join("garbled.json");
    fs::write(&garbled, "{not json").unwrap();
    let out = run(&["validate-tree", "--tree", &path_str(&garbled)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = path_str(&dir.path().join("nope.json"));
    let out = run(&["validate-tree", "--tree", &missing]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["inspect-model", "--model", &missing]);
    assert_eq!(out.status.code(), Some(2));
    let missing_dir = path_str(&dir.path().join("nodata"));
    let out = run(&[
        "train", "--data", &missing_dir, "--tree", &missing, "--iters", "10",
        "--out", &path_str(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
