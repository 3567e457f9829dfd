use std::fs;

use qkdnet_core::controller::ConnState;
use qkdnet_core::fixtures;
use qkdnet_core::qkd::{calibrate, CalibratedParams};
use qkdnet_core::sim::{report, run, Scenario};

fn params() -> CalibratedParams {
    calibrate(
        &fixtures::table3_rows(),
        &fixtures::anchors(),
        &fixtures::lab_topology(),
        &fixtures::field_topology(),
    )
    .unwrap()
}

fn bundled(name: &str) -> Scenario {
    let path = format!("{}/../../scenarios/{name}", env!("CARGO_MANIFEST_DIR"));
    Scenario::parse(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn failover_moves_off_the_degraded_span() {
    let out = run(&bundled("failover.json"), &params(), 7).unwrap();
    let s = &out.summary[0];
    assert_eq!(s.final_state, ConnState::TornDown);
    assert!(s.routes_tried >= 2);
    assert!(!s.route.split('+').any(|span| span == "L1"), "still on {}", s.route);
    let reroute = out
        .controller_log
        .iter()
        .find(|r| r.event == "rerouting")
        .expect("a reroute");
    assert!((2000.0..2120.0).contains(&reroute.timestamp_s));
}

#[test]
fn coexistence_on_l4_reaches_encryption() {
    let out = run(&bundled("coexistence.json"), &params(), 1).unwrap();
    let s = &out.summary[0];
    assert_eq!(s.final_state, ConnState::EncryptionActive);
    assert_eq!(s.route, "L4");
    assert_eq!(s.failed_rekeys, 0);
    assert!(s.last_skr_bps.unwrap() > 350.0);
}

#[test]
fn removed_span_cuts_the_running_session() {
    let text = r#"{
        "topology": "lab",
        "duration_s": 4000,
        "sigma_rel": 0.0,
        "requests": [{"at_s": 0, "src": "N2", "dst": "N1", "kind": "quantum_secured"}],
        "faults": [{"at_s": 1500, "fault": {"remove_span": "L1"}}]
    }"#;
    let out = run(&Scenario::parse(text).unwrap(), &params(), 3).unwrap();
    let s = &out.summary[0];
    assert_ne!(s.route, "L1");
    assert!(s.routes_tried >= 2);
    assert!(out.route_table.lines().all(|l| !l.split_whitespace().any(|w| w == "L1")));
}

#[test]
fn different_seeds_change_the_observations() {
    let scenario = bundled("failover.json");
    let p = params();
    let dir = tempfile::tempdir().unwrap();
    for seed in [1u64, 2] {
        let out = run(&scenario, &p, seed).unwrap();
        report::emit_run(&out, &dir.path().join(seed.to_string())).unwrap();
    }
    let a = fs::read(dir.path().join("1/controller_log.csv")).unwrap();
    let b = fs::read(dir.path().join("2/controller_log.csv")).unwrap();
    assert_ne!(a, b);
}
