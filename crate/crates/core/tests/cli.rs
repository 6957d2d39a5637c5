use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kvtier::metrics::SimReport;

const SMALL: &str = r#"
config_version = 1
backend = "dma_copy"

[workload]
profile = "loogle"
num_contexts = 3
rate = 5.0
"#;

fn kvtier(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvtier"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn kvtier")
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn run_writes_all_artifacts() {
    let dir = workspace();
    let o = kvtier(dir.path(), &["run", "--config", "small.toml", "--out", "out"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for f in ["report.json", "batches.csv", "requests.csv", "scheduler.jsonl"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report: SimReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let rows = fs::read_to_string(out.join("requests.csv")).unwrap().lines().count();
    assert_eq!(rows, report.per_request.len() + 1);
    let batches = fs::read_to_string(out.join("scheduler.jsonl")).unwrap().lines().count();
    assert_eq!(batches, report.per_batch.len());
}

#[test]
fn identical_runs_produce_identical_bytes() {
    let dir = workspace();
    for out in ["a", "b"] {
        let o = kvtier(dir.path(), &["run", "--config", "small.toml", "--seed", "7", "--out", out]);
        assert_eq!(code(&o), 0);
    }
    for f in ["report.json", "batches.csv", "requests.csv", "scheduler.jsonl"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn generated_trace_replays_to_the_same_report() {
    let dir = workspace();
    assert_eq!(code(&kvtier(dir.path(), &["gen-trace", "--config", "small.toml", "--out", "t"])), 0);
    assert_eq!(code(&kvtier(dir.path(), &["run", "--config", "small.toml", "--out", "gen"])), 0);
    let o = kvtier(dir.path(), &["run", "--config", "small.toml", "--trace", "t/trace.jsonl", "--out", "file"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(dir.path().join("gen/report.json")).unwrap(),
        fs::read(dir.path().join("file/report.json")).unwrap()
    );
}

#[test]
fn sweep_page_writes_one_row_per_size() {
    let dir = workspace();
    let o = kvtier(dir.path(), &["sweep-page", "--config", "small.toml", "--sizes", "1,16,32,64,256,1024", "--out", "m"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("m/matrix.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(header.contains(&"hit_rate") && header.contains(&"ttft_mean"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn ablate_runs_every_feature_subset() {
    let dir = workspace();
    let o = kvtier(dir.path(), &["ablate", "--config", "small.toml", "--features", "deferral,bubble", "--out", "m"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("m/matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn bad_input_exits_with_2() {
    let dir = workspace();
    fs::write(dir.path().join("bad.jsonl"), "not json\n").unwrap();
    fs::write(dir.path().join("v9.toml"), "config_version = 9\n").unwrap();
    for args in [
        &["run", "--config", "missing.toml"][..],
        &["run", "--config", "v9.toml"],
        &["run", "--config", "small.toml", "--trace", "bad.jsonl"],
        &["run", "--config", "small.toml", "--pattern", "sideways"],
        &["run", "--profile", "abacus"],
        &["no-such-command"],
    ] {
        let o = kvtier(dir.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn simulation_failure_exits_with_3() {
    let dir = workspace();
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let o = kvtier(dir.path(), &["run", "--config", "small.toml", "--trace", "empty.jsonl", "--out", "o"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
