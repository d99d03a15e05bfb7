use std::fs;
use std::path::Path;
use std::process::Command;

fn biascl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_biascl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn biascl")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
            "scenario": {"preset": "two-task-backward", "n_train": 24, "n_test": 12},
            "method": {"id": "fine-tuning"},
            "hyper": {"epochs": 2, "hidden": [8]},
            "seeds": [0, 1]
        }"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_a_header_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("stream.jsonl");
    let o = biascl(&["gen", "--config", &config, "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // meta line + 2 tasks × 2 classes × (24 train + 12 test + 12 flipped)
    assert_eq!(lines.len(), 1 + 2 * 2 * (24 + 12 + 12));
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert!(first.get("meta").is_some());
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let runs = dir.path().join("runs");
    let o = biascl(&["run", "--config", &config, "--method", "lwf", "--bgs", "--out", runs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // two levels × two seeds
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 4);
    let row: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(row["method"], "lwf");
    assert_eq!(row["variant"], "+bgs");
    assert_eq!(fs::read_dir(&runs).unwrap().count(), 4);

    let tables = dir.path().join("tables");
    let o = biascl(&["report", runs.to_str().unwrap(), "--out", tables.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(tables.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("lwf,+bgs,"));
}

#[test]
fn sweep_marks_representatives() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let o = biascl(&[
        "sweep", "--config", &config, "--method", "ewc", "--seed", "0", "--preset", "two-task-forward",
        "--points", "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    // one sweep per expanded level, three grid points each
    assert_eq!(stdout.lines().count(), 6);
    assert!(stdout.lines().any(|l| l.starts_with('*')));
}

#[test]
fn bad_input_fails_cleanly() {
    let o = biascl(&["run", "--method", "nope"]);
    assert!(!o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"unknown": true}"#).unwrap();
    let o = biascl(&["run", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown"));
    let o = biascl(&["sweep", "--method", "fine-tuning", "--seed", "0"]);
    assert!(!o.status.success());
}
