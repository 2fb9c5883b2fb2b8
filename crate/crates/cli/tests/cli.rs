use std::path::Path;
use std::process::{Command, Output};

fn demand(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demand"))
        .args(args)
        .env("DEMAND_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path) {
    let out = demand(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "3",
        "--stores",
        "2",
        "--items",
        "2",
        "--end",
        "2013-06-30",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &[&str] = &[
    "--runs",
    "1",
    "--no-sweep",
    "--set",
    "split.train_start=2013-01-01",
    "--set",
    "split.train_end=2013-05-15",
    "--set",
    "split.test_start=2013-05-16",
    "--set",
    "split.test_end=2013-06-30",
    "--set",
    "forest.ntree=10",
    "--set",
    "net.layers=2",
    "--set",
    "net.neurons=8",
    "--set",
    "net.epochs=5",
    "--set",
    "compare.net_runs=1",
    "--set",
    "compare.bagging_runs=1",
    "--set",
    "compare.bagging_ntree=5",
];

#[test]
fn run_writes_predictions_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out_dir = dir.path().join("out");
    synth(&data);
    let mut args = vec![
        "run",
        "--input-dir",
        data.to_str().unwrap(),
        "-o",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let out = demand(&args);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("predictions:"));
    assert!(stdout.contains("OLS"));

    let preds = std::fs::read_to_string(out_dir.join("predictions.csv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("id,units"));
    // 2 stores x 2 items x 46 test days
    assert_eq!(lines.count(), 2 * 2 * 46);
    assert!(out_dir.join("reports/compare.csv").is_file());
}

#[test]
fn ingest_only_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let out_dir = dir.path().join("out");
    let mut args = vec![
        "ingest",
        "--input-dir",
        data.to_str().unwrap(),
        "-o",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let out = demand(&args);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("rows: train"));
    assert!(!out_dir.join("predictions.csv").exists());
}

#[test]
fn bad_override_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let out = demand(&[
        "ingest",
        "--input-dir",
        data.to_str().unwrap(),
        "--set",
        "forest.mtry=zero",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = demand(&["ingest", "--input-dir", data.to_str().unwrap(), "--set", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = demand(&["ingest", "--input-dir", dir.path().join("none").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_sales_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let sales = data.join("sales.csv");
    let mut text = std::fs::read_to_string(&sales).unwrap();
    text.push_str("2013-02-30,1,1,4\n");
    std::fs::write(&sales, text).unwrap();
    let out = demand(&[
        "ingest",
        "--input-dir",
        data.to_str().unwrap(),
        "-o",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn worker_override_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_demand"))
        .args(["synth", "--out", "unused"])
        .env("DEMAND_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
