use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qkdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdnet")).args(args).output().expect("binary runs")
}

fn repo(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).display().to_string()
}

fn fixture(name: &str) -> String {
    repo(&format!("crates/core/fixtures/{name}"))
}

fn calibrated(dir: &Path) -> PathBuf {
    let out = dir.join("params.json");
    let o = qkdnet(&[
        "calibrate",
        "--table3",
        &fixture("table3.csv"),
        "--anchors",
        &fixture("anchors.json"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn topology_validate_exit_codes() {
    assert_eq!(qkdnet(&["topology", "validate", &fixture("lab_topology.json")]).status.code(), Some(0));
    assert_eq!(qkdnet(&["topology", "validate", &fixture("field_topology.json")]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"nodes": [], "spans": []}"#).unwrap();
    assert_eq!(qkdnet(&["topology", "validate", bad.to_str().unwrap()]).status.code(), Some(1));

    let missing = dir.path().join("missing.json");
    assert_eq!(qkdnet(&["topology", "validate", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn calibrate_reports_every_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let o = qkdnet(&[
        "calibrate",
        "--table3",
        &fixture("table3.csv"),
        "--anchors",
        &fixture("anchors.json"),
        "--out",
        dir.path().join("p.json").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(!stdout.contains("FAIL"));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("ok")).count(), 10);
    assert!(dir.path().join("p.json").exists());
}

#[test]
fn calibrate_rejects_a_malformed_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.csv");
    fs::write(&table, "link,length_km,budget_db,n_oxc,qber_pct,skr_bps\nL1,0.5,5.19,2,1.31,1762.06\n").unwrap();
    let o = qkdnet(&[
        "calibrate",
        "--table3",
        table.to_str().unwrap(),
        "--anchors",
        &fixture("anchors.json"),
        "--out",
        dir.path().join("p.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("p.json").exists());
}

#[test]
fn presets_write_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let params = calibrated(dir.path());
    for name in ["table3", "fig4a", "fig4b", "fig4cd", "fig5"] {
        let out = dir.path().join(name);
        let o = qkdnet(&["preset", name, "--params", params.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(format!("{name}.csv")).exists());
        assert!(out.join("summary.csv").exists());
    }
    let table = fs::read_to_string(dir.path().join("table3/table3.csv")).unwrap();
    assert_eq!(table.lines().count(), 13);
    assert!(qkdnet(&["preset", "fig9", "--params", params.to_str().unwrap(), "--out", "x"]).status.code() != Some(0));
}

#[test]
fn run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let params = calibrated(dir.path());
    let scenario = repo("scenarios/failover.json");
    for out in ["a", "b"] {
        let o = qkdnet(&[
            "run",
            "--scenario",
            &scenario,
            "--seed",
            "11",
            "--out",
            dir.path().join(out).to_str().unwrap(),
            "--params",
            params.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["events.csv", "controller_log.csv", "key_audit.csv", "route_table.txt", "summary.csv", "metrics.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn run_rejects_a_bad_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.json");
    fs::write(&scenario, r#"{"topology": "mars", "duration_s": 10}"#).unwrap();
    let o = qkdnet(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
