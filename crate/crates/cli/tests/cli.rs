use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ebmbd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebmbd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{
  "preset": "hard",
  "horizon": 8,
  "schedule": {"S": 12},
  "sampler": {"N": 16, "seed": 4},
  "seeds": 2
}
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn run_writes_records_summary_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let res = ebmbd(&["run", "--config", &cfg, "--algo", "ebmbd", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", text(&res.stderr));
    assert!(out.join("runs/4.json").exists());
    assert!(out.join("runs/5.json").exists());
    assert!(out.join("liveliness_1.csv").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("ebmbd,2,"));
}

#[test]
fn config_syntax_error_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    fs::write(&path, "{\n  \"seeds\": 2,\n  \"sampler\": {\"N\": }\n}\n").unwrap();
    let res = ebmbd(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = text(&res.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn out_of_range_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"schedule\": {\n    \"kappa\": -1\n  }\n}\n").unwrap();
    let res = ebmbd(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = text(&res.stderr);
    assert!(err.contains("kappa"), "{err}");
}

#[test]
fn compare_tabulates_every_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("cmp");
    let res = ebmbd(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", text(&res.stderr));
    let stdout = text(&res.stdout);
    for name in ["mbd", "ebmbd", "projected-mbd", "dpcc-mbd"] {
        assert!(stdout.contains(name), "{stdout}");
        assert!(out.join(name).join("summary.csv").exists());
    }
    assert!(stdout.contains("runtime ratio"));
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 5);
}

#[test]
fn sweep_kappa_writes_each_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    let res = ebmbd(&[
        "sweep-kappa",
        "--config",
        &cfg,
        "--kappas",
        "1,16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", text(&res.stderr));
    assert!(out.join("liveliness_1.csv").exists());
    assert!(out.join("liveliness_16.csv").exists());
}

#[test]
fn validate_bounds_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bounds");
    let res = ebmbd(&[
        "validate-bounds",
        "--lemma",
        "5",
        "--theorem",
        "3",
        "--draws",
        "20000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}{}", text(&res.stdout), text(&res.stderr));
    let csv = fs::read_to_string(out.join("bounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
}

#[test]
fn missing_world_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"world": "nowhere.json"}"#).unwrap();
    let res = ebmbd(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(text(&res.stderr).contains("nowhere.json"));
}
