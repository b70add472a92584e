use std::path::{Path, PathBuf};
use std::process::Command;

use dynsparse_cli::{dispatch, CHECKPOINT_FILE, METRICS_FILE};

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .display()
        .to_string()
}

fn run(args: &[&str]) -> String {
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    let mut out = Vec::new();
    dispatch(&args, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

fn small_mnist(out: &Path, epochs: &str) -> Vec<String> {
    [
        "train",
        "--task",
        "mnist",
        "--data-dir",
        &data("mnist"),
        "--out-dir",
        out.to_str().unwrap(),
        "--epochs",
        epochs,
        "--train-limit",
        "500",
        "--test-limit",
        "300",
        "--width",
        "64",
        "--block",
        "16",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn zero_epochs_still_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let args = small_mnist(dir.path(), "0");
    let mut out = Vec::new();
    dispatch(&args, &mut out).unwrap();
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
    assert!(dir.path().join(METRICS_FILE).exists());
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let line = run(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(line.contains("\"split\":\"test\""));
}

#[test]
fn eval_after_reload_reproduces_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let args = small_mnist(dir.path(), "2");
    let mut out = Vec::new();
    dispatch(&args, &mut out).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let last = metrics.lines().last().unwrap();
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let line = run(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(line.trim(), last);
}

#[test]
fn analyze_gates_partitions_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    dispatch(&small_mnist(dir.path(), "1"), &mut Vec::new()).unwrap();
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let text = run(&["analyze-gates", "--checkpoint", ckpt.to_str().unwrap()]);
    let json: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    let layers = json["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    for l in layers {
        let sum: u64 = ["always_on", "always_off", "input_dependent"]
            .iter()
            .map(|k| l[k].as_u64().unwrap())
            .sum();
        assert_eq!(sum, 16);
    }
}

#[test]
fn heatmap_writes_one_csv_per_class() {
    let dir = tempfile::tempdir().unwrap();
    dispatch(&small_mnist(dir.path(), "1"), &mut Vec::new()).unwrap();
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let maps: PathBuf = dir.path().join("maps");
    run(&[
        "heatmap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        maps.to_str().unwrap(),
    ]);
    let layer_dir = maps.join("hidden2");
    let csvs = std::fs::read_dir(&layer_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "csv")
        })
        .count();
    assert_eq!(csvs, 10);
    assert!(layer_dir.join("summary.json").exists());
}

#[test]
fn bench_flops_reports_requested_levels() {
    let text = run(&[
        "bench-flops",
        "--hidden",
        "256",
        "--block",
        "32",
        "--sparsity",
        "0.5,0.75",
        "--json",
    ]);
    let rows: Vec<serde_json::Value> = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["matvec_fraction"].as_f64().unwrap(), 0.5);
    assert_eq!(rows[1]["matvec_fraction"].as_f64().unwrap(), 0.25);
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let bin = env!("CARGO_BIN_EXE_dynsparse");
    let out = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
    let out = Command::new(bin)
        .args(["train", "--epochs", "many"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin)
        .args(["eval", "--checkpoint", "/nonexistent/x.bdsp"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
