use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SCENARIO: &str = r#"
[system]
z = 2
n = 4
f = 1
batch_size = 10
base_timeout = 1000
checkpoint_period = 1000
seed = 11

[workload]
batches = 4
clients = 1
depth = 2
"#;

fn geobft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geobft"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn three_repetitions_emit_four_records() {
    let dir = TempDir::new().unwrap();
    let scenario = write(dir.path(), "s.toml", SCENARIO);
    let out_file = dir.path().join("records.txt");
    let o = geobft(&[
        "run",
        "--scenario",
        p(&scenario),
        "--repetitions",
        "3",
        "--out",
        p(&out_file),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[..3].iter().all(|l| l.starts_with("record=run")));
    assert!(lines[3].starts_with("record=average key="));
    assert!(lines[3].contains(" runs=3 "));
    assert!(lines[0].contains(" seed=11 ") && lines[2].contains(" seed=13 "));
    assert_eq!(std::fs::read_to_string(&out_file).unwrap(), text);
}

#[test]
fn invalid_scenario_exits_two() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.toml", "[system]\nz = 0\n");
    assert_eq!(geobft(&["run", "--scenario", p(&bad)]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(geobft(&["run", "--scenario", p(&missing)]).status.code(), Some(2));
    assert_eq!(geobft(&["run"]).status.code(), Some(2));
    assert_eq!(geobft(&["fly"]).status.code(), Some(2));
    let scenario = write(dir.path(), "s.toml", SCENARIO);
    let o = geobft(&["run", "--scenario", p(&scenario), "--mode", "hotstuff"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn breach_exits_one_and_writes_trace() {
    let dir = TempDir::new().unwrap();
    let scenario = write(dir.path(), "s.toml", &format!("{SCENARIO}\n[run]\ntime_cap_ms = 5\n"));
    let o = geobft(&["run", "--scenario", p(&scenario), "--trace-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("not live"), "{err}");
    let path = err
        .lines()
        .find_map(|l| l.split("trace written to ").nth(1))
        .expect("trace path printed");
    assert!(std::fs::read_to_string(path.trim()).unwrap().lines().count() > 1);
}

#[test]
fn compare_self_is_unity_and_modes_differ() {
    let dir = TempDir::new().unwrap();
    let scenario = write(dir.path(), "s.toml", SCENARIO);
    let records = dir.path().join("geo.txt");
    let o = geobft(&["run", "--scenario", p(&scenario), "--out", p(&records)]);
    assert_eq!(o.status.code(), Some(0));
    let o = geobft(&["compare", p(&records), p(&records)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("throughput_ratio=1.0000"), "{text}");
    assert!(text.contains("latency_ratio=1.0000"));
    assert!(text.contains("global_per_decision_ratio=1.0000"));

    let flat = dir.path().join("flat.txt");
    let o = geobft(&[
        "run",
        "--scenario",
        p(&scenario),
        "--mode",
        "flat-pbft",
        "--out",
        p(&flat),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let o = geobft(&["compare", p(&records), p(&flat)]);
    assert!(stdout(&o).contains("subject=geobft baseline=flat-pbft"));

    let o = geobft(&["compare", "--scenario", p(&scenario)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o).lines().filter(|l| l.starts_with("record=compare")).count(),
        1
    );
}

#[test]
fn compare_refuses_mismatched_scenarios() {
    let dir = TempDir::new().unwrap();
    let a = write(dir.path(), "a.toml", SCENARIO);
    let b = write(
        dir.path(),
        "b.toml",
        &SCENARIO.replace("batch_size = 10", "batch_size = 20"),
    );
    let (ra, rb) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    geobft(&["run", "--scenario", p(&a), "--out", p(&ra)]);
    geobft(&["run", "--scenario", p(&b), "--out", p(&rb)]);
    let o = geobft(&["compare", p(&ra), p(&rb)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not comparable"));
}

#[test]
fn single_value_sweep_prints_one_row() {
    let dir = TempDir::new().unwrap();
    let scenario = write(dir.path(), "s.toml", SCENARIO);
    let out_file = dir.path().join("sweep.txt");
    let o = geobft(&[
        "sweep",
        "--scenario",
        p(&scenario),
        "--axis",
        "batch_size",
        "--values",
        "10",
        "--out",
        p(&out_file),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 2);
    let records = std::fs::read_to_string(out_file).unwrap();
    assert!(records.lines().all(|l| l.starts_with("batch_size=10 record=")));
}

#[test]
fn invalid_sweep_value_exits_two() {
    let dir = TempDir::new().unwrap();
    let scenario = write(dir.path(), "s.toml", SCENARIO);
    let o = geobft(&[
        "sweep",
        "--scenario",
        p(&scenario),
        "--axis",
        "clusters",
        "--values",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ledger_export_and_verification() {
    let dir = TempDir::new().unwrap();
    let scenario = write(dir.path(), "s.toml", SCENARIO);
    let ledger = dir.path().join("ledger.ndjson");
    let o = geobft(&["run", "--scenario", p(&scenario), "--ledger", p(&ledger)]);
    assert_eq!(o.status.code(), Some(0));
    let o = geobft(&["verify-ledger", "--scenario", p(&scenario), "--ledger", p(&ledger)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("valid blocks=8 head="));

    let text = std::fs::read_to_string(&ledger).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let line = &mut lines[2];
    let flipped = if line.ends_with('0') { '1' } else { '0' };
    line.pop();
    line.push(flipped);
    let tampered = write(dir.path(), "tampered.ndjson", &(lines.join("\n") + "\n"));
    let o = geobft(&["verify-ledger", "--scenario", p(&scenario), "--ledger", p(&tampered)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("invalid"));

    let o = geobft(&[
        "verify-ledger",
        "--scenario",
        p(&scenario),
        "--ledger",
        p(&ledger),
        "--seed",
        "12",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let garbage = write(dir.path(), "garbage.ndjson", "zz\n");
    let o = geobft(&["verify-ledger", "--scenario", p(&scenario), "--ledger", p(&garbage)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trace_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let scenario = write(dir.path(), "s.toml", SCENARIO);
    let a = geobft(&["trace", "--scenario", p(&scenario), "--seed", "3"]);
    let b = geobft(&["trace", "--scenario", p(&scenario), "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let c = geobft(&["trace", "--scenario", p(&scenario), "--seed", "3", "--jitter", "0"]);
    assert_ne!(a.stdout, c.stdout);
    let last = stdout(&a).lines().last().unwrap().to_string();
    assert!(last.starts_with("protocol=geobft"));
}

#[test]
fn checked_in_scenarios_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            geobft_sim::Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 6);
}
