use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_trustlayer");

fn trustlayer(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_small(out: &Path) {
    let o = trustlayer(&["run", "--preset", "clinical", "--n-tasks", "300", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    run_small(tmp.path());
    for f in ["report.json", "report.md", "run_meta.json", "scenario.json", "evidence/clinical.jsonl"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    let meta: Value = serde_json::from_slice(&fs::read(tmp.path().join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 42);
    assert_eq!(meta["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_flag_overrides_the_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = trustlayer(&["run", "--preset", "judicial", "--n-tasks", "50", "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let meta: Value = serde_json::from_slice(&fs::read(out.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);
}

#[test]
fn malformed_config_exits_1_with_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    let mut v: Value = serde_json::from_str(trustlayer::sim::presets::preset_json("clinical").unwrap()).unwrap();
    v["sub_domains"][0]["trigger"]["confidence_threshold"] = Value::from("high");
    fs::write(&bad, v.to_string()).unwrap();
    for args in [
        vec!["validate", "--scenario", bad.to_str().unwrap()],
        vec!["run", "--scenario", bad.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()],
    ] {
        let o = trustlayer(&args);
        assert_eq!(o.status.code(), Some(1));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("$.sub_domains[0].trigger.confidence_threshold"), "{err}");
    }
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn verify_detects_edits() {
    let tmp = tempfile::tempdir().unwrap();
    run_small(tmp.path());
    let dir = tmp.path().to_str().unwrap();
    assert_eq!(trustlayer(&["verify", "--evidence", dir]).status.code(), Some(0));
    // the evidence subdirectory is accepted too
    let ev = tmp.path().join("evidence");
    assert_eq!(trustlayer(&["verify", "--evidence", ev.to_str().unwrap()]).status.code(), Some(0));

    let log = ev.join("clinical.jsonl");
    let original = fs::read_to_string(&log).unwrap();
    fs::write(&log, original.replacen("\"L3\"", "\"L4\"", 1)).unwrap();
    assert_eq!(trustlayer(&["verify", "--evidence", dir]).status.code(), Some(3));

    // dropping a task's final record is caught as truncation
    let lines: Vec<&str> = original.lines().collect();
    let cut = lines.iter().position(|l| l.contains("\"finalization\"")).unwrap();
    let truncated: String = lines.iter().enumerate().filter(|(i, _)| *i != cut).map(|(_, l)| format!("{l}\n")).collect();
    fs::write(&log, truncated).unwrap();
    assert_eq!(trustlayer(&["verify", "--evidence", dir]).status.code(), Some(3));
    fs::write(&log, &original).unwrap();

    let report = tmp.path().join("report.json");
    let text = fs::read_to_string(&report).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["sub_domains"]["clinical"]["metrics"][9]["value"] = Value::from(0.5);
    fs::write(&report, v.to_string()).unwrap();
    let o = trustlayer(&["verify", "--evidence", dir]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("review_burden_index"), "{err}");
    assert!(err.contains("reported 0.5"), "{err}");
}

#[test]
fn report_formats() {
    let tmp = tempfile::tempdir().unwrap();
    run_small(tmp.path());
    let dir = tmp.path().to_str().unwrap();
    let json = trustlayer(&["report", "--in", dir, "--format", "json"]);
    assert!(json.status.success());
    assert_eq!(json.stdout, fs::read(tmp.path().join("report.json")).unwrap());
    let v: Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["platform"]["metrics"].as_array().unwrap().len(), 17);

    let md = trustlayer(&["report", "--in", dir, "--format", "md"]);
    assert!(md.status.success());
    assert_eq!(md.stdout, fs::read(tmp.path().join("report.md")).unwrap());
    let text = String::from_utf8(md.stdout).unwrap();
    for name in trustlayer::metrics::MetricName::ALL {
        // platform plus one sub-domain table
        assert_eq!(text.matches(&format!("| {}", name.as_str())).count(), 2, "{}", name.as_str());
    }
}

#[test]
fn missing_run_dir_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let gone = tmp.path().join("nothing");
    assert_eq!(trustlayer(&["report", "--in", gone.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(trustlayer(&["verify", "--evidence", gone.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn schema_command_prints_the_published_schema() {
    let o = trustlayer(&["schema"]);
    assert!(o.status.success());
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, trustlayer::sim::validate::scenario_schema());
}
