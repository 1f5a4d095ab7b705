//! Scenario runs through the library harness.

use std::path::Path;

use ccnx_migrate::harness::run_scenario;
use ccnx_migrate::report::Outcome;
use ccnx_migrate::scenario::{NamingChoice, Scenario};
use ccnx_migrate_core::routing::HandoverModel;

fn default_scenario() -> Scenario {
    Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/default.json")).unwrap()
}

#[test]
fn external_model_completes_without_handover() {
    let mut s = default_scenario();
    s.routing = HandoverModel::External;
    s.probe = None;
    let run = run_scenario(&s).unwrap();
    let m = &run.report.migrations[0];
    assert_eq!(m.outcome, Outcome::Completed);
    assert!(m.equivalence.is_pass());
    assert_eq!(m.handover_at, None);
    assert!(m.route_changes.is_empty());
}

#[test]
fn weak_naming_completes_and_fetches_weak_objects() {
    let mut s = default_scenario();
    s.naming = NamingChoice::Weak;
    let run = run_scenario(&s).unwrap();
    let m = &run.report.migrations[0];
    assert!(m.equivalence.is_pass());
    assert!(m.dedup.weak_fetched > 0);
    assert_eq!(
        m.dedup.hash_fetched + m.dedup.weak_fetched,
        m.dedup.unique_objects
    );
}

#[test]
fn round_cap_forces_stop_and_copy() {
    let mut s = default_scenario();
    s.stop.alpha = 100.0;
    s.stop.max_rounds = 3;
    let run = run_scenario(&s).unwrap();
    let m = &run.report.migrations[0];
    assert!(m.equivalence.is_pass());
    assert_eq!(m.rounds, 3);
}

#[test]
fn abort_rolls_back_source() {
    let mut s = default_scenario();
    s.topology.links[1].loss = 0.5;
    s.transport.max_retries = 0;
    s.transport.poll_retries = 0;
    s.probe = None;
    let run = run_scenario(&s).unwrap();
    let m = &run.report.migrations[0];
    assert_eq!(m.outcome, Outcome::Aborted);
    assert_eq!(run.report.exit_code(), 3);
    assert_eq!(m.vm_started_at, None);
    // Rolling back releases every published checkpoint.
    assert_eq!(m.source_store_objects, 0);
    let rolled_back = m
        .events
        .iter()
        .any(|e| serde_json::to_value(e).unwrap()["event"] == "rolled_back");
    assert!(rolled_back);
}

#[test]
fn same_seed_same_report() {
    let s = default_scenario();
    let a = run_scenario(&s).unwrap().report.to_json();
    let b = run_scenario(&s).unwrap().report.to_json();
    assert_eq!(a, b);
}
