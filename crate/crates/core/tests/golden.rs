use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_docoap");

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn run(args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn sizes_table() {
    assert_eq!(run(&["sizes"]), fs::read_to_string(golden("sizes.csv")).unwrap());
}

#[test]
fn trace_statistics() {
    let trace = golden("trace.txt");
    assert_eq!(run(&["analyze-trace", trace.to_str().unwrap()]), fs::read_to_string(golden("trace_stats.csv")).unwrap());
}

#[test]
fn simulation_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.json");
    fs::write(&scenario, r#"{"workload": {"n_queries": 3}}"#).unwrap();
    let out = dir.path().join("out");
    run(&["simulate", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let expected = fs::read_to_string(golden("simulate_headers.txt")).unwrap();
    for line in expected.lines() {
        let (file, header) = line.split_once(": ").unwrap();
        let text = fs::read_to_string(out.join(file)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{file}");
    }
    let events: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("seed-1/events.json")).unwrap()).unwrap();
    assert_eq!(events["schema_version"], 1);
    let kinds: Vec<&str> = events["events"].as_array().unwrap().iter().map(|e| e["event"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"query") && kinds.contains(&"datagram"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], 1);
}
