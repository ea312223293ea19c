use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_trendnet");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn scenario(root: &Path, name: &str) -> (Vec<u8>, Vec<u8>) {
    let dir = root.join(name);
    ok(&dir, &["simulate", "--hours", "72", "--period", "1h", "--seed", "11"]);
    ok(&dir, &["benchmark", "build", "--days", "3"]);
    ok(&dir, &["simulate", "--hours", "9"]);
    ok(&dir, &["inject", "--src", "10.0.1.0/24", "--dst", "10.0.3.0/24", "--factor", "4", "--hours", "4"]);
    ok(&dir, &["simulate", "--hours", "12"]);
    let json = root.join(format!("{name}.json"));
    let csv = root.join(format!("{name}.csv"));
    ok(&dir, &["report", "--out", json.to_str().unwrap()]);
    ok(&dir, &["report", "--out", csv.to_str().unwrap(), "--format", "csv"]);
    (std::fs::read(json).unwrap(), std::fs::read(csv).unwrap())
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let root = tempfile::tempdir().unwrap();
    let a = scenario(root.path(), "a");
    let b = scenario(root.path(), "b");
    assert_eq!(a, b);
    let csv = String::from_utf8(a.1).unwrap();
    assert_eq!(csv.lines().next(), Some("link,hour,mean,sigma"));
    assert_eq!(csv.lines().count(), 1 + 4 * 24);
    let doc: serde_json::Value = serde_json::from_slice(&a.0).unwrap();
    assert_eq!(doc["scenario"]["seed"], 11);
    assert_eq!(doc["scenario"]["days"], 3);
    assert_eq!(doc["scenario"]["period_ms"], 3_600_000);
}

#[test]
fn simulate_reports_polls_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["simulate", "--hours", "72", "--period", "1h"]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["polls"], 73);
    assert_eq!(v["samples"], 72 * 4);
}

#[test]
fn benchmark_on_empty_store_exits_1_naming_hours() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["benchmark", "build", "--days", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("insufficient data for hours [0, 1, 2"), "{err}");
}

#[test]
fn usage_errors_exit_2_with_synopsis() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["--bogus"][..],
        &["simulate"],
        &["simulate", "--hours", "-3"],
        &["inject", "--src", "nope", "--dst", "10.0.3.0/24", "--factor", "2", "--hours", "1"],
        &["report", "--out", "x", "--format", "xml"],
        &["serve"],
    ] {
        let out = run(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage:"), "{args:?}: {err}");
    }
}

#[test]
fn changing_seed_on_existing_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--hours", "1", "--seed", "1"]);
    ok(dir.path(), &["simulate", "--hours", "1", "--seed", "1"]);
    let out = run(dir.path(), &["simulate", "--hours", "1", "--seed", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.json"));
}

#[test]
fn watch_prints_filtered_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut cfg = trendnet_core::config::SystemConfig::default();
    cfg.traffic = cfg.traffic.without_noise();
    let cfg_path = d.join("quiet.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let data = d.join("data");
    let c = cfg_path.to_str().unwrap();
    ok(&data, &["--config", c, "simulate", "--hours", "81"]);
    ok(&data, &["benchmark", "build"]);
    ok(&data, &["inject", "--src", "10.1.1.0/24", "--dst", "10.1.3.0/24", "--factor", "3", "--hours", "5"]);
    ok(&data, &["simulate", "--hours", "12"]);

    let all = ok(&data, &["watch", "--no-follow"]);
    let lines: Vec<serde_json::Value> = all.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l["kind"] == "trend" || l["kind"] == "decision"));
    let seqs: Vec<u64> = lines.iter().map(|l| l["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    let statuses: Vec<&str> = lines
        .iter()
        .filter(|l| l["kind"] == "decision")
        .map(|l| l["payload"]["status"].as_str().unwrap())
        .collect();
    assert_eq!(statuses, ["planned", "applied", "reverted"]);

    let s1 = ok(&data, &["watch", "--no-follow", "--links", "S1/eth1"]);
    assert!(!s1.is_empty());
    assert!(s1.lines().count() < lines.len());
    let by_ip = ok(&data, &["watch", "--no-follow", "--links", "10.0.0.20/eth1"]);
    assert_eq!(by_ip, s1);
    assert!(ok(&data, &["watch", "--no-follow", "--links", "R1/FastEthernet0_0"]).is_empty());
    assert_eq!(run(&data, &["watch", "--no-follow", "--links", "garbage"]).status.code(), Some(1));
}
