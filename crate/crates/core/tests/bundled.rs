//! Every bundled scenario runs clean through the harness and the CLI.

mod common;

use cerberus::analysis::costs::{conformance, measure};
use cerberus::harness::fuzz::{check_recovery, Recovery};
use cerberus::harness::{run_scenario, Scenario, ScenarioError};
use cerberus::ids::{Decision, Protocol, TxnId};
use common::bundled;
use std::path::PathBuf;
use std::process::Command;

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn all_bundled() -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".scenario"))
        .collect();
    v.sort();
    v
}

#[test]
fn bundled_scenarios_pass_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let names = all_bundled();
    assert!(names.len() >= 7);
    for n in names {
        let o = run_scenario(&bundled(&n), dir.path()).unwrap();
        assert!(o.ok(), "{n}:\n{}", o.report);
        for f in &o.files {
            assert!(f.exists());
        }
    }
}

#[test]
fn flows_commit_with_table_costs() {
    for (name, p) in [("ccb_flow.scenario", Protocol::Ccb), ("ocb_flow.scenario", Protocol::Ocb), ("pcb_flow.scenario", Protocol::Pcb)] {
        let r = cerberus::protocol::run(bundled(name).config);
        assert!(r.decisions(TxnId(1)).values().all(|d| d == &[Decision::Commit].into()), "{name}");
        let m = measure(&r, TxnId(1), 10).unwrap();
        assert!(conformance(p, &m).is_empty(), "{name}: {m:?}");
    }
}

#[test]
fn attack_scenario_recovers_the_round() {
    let r = cerberus::protocol::run(bundled("ocb_attack.scenario").config);
    assert_eq!(check_recovery(&r, TxnId(1)), Recovery::Held);
    assert!(r.committed().contains(&TxnId(2)));
}

#[test]
fn unknown_keys_are_rejected() {
    let src = std::fs::read_to_string(scenario_dir().join("ccb_flow.scenario")).unwrap();
    let bad = src.replace("[topology]", "[topology]\nshardz = 3");
    assert!(matches!(Scenario::parse(&bad), Err(ScenarioError::Parse(m)) if m.contains("shardz")));
}

#[test]
fn cli_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_cerberus"))
        .arg("run")
        .arg(scenario_dir().join("pcb_race.scenario"))
        .env("CERBERUS_OUT", dir.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(dir.path().join("pcb_race.trace.jsonl").exists());
    assert!(dir.path().join("pcb_race.requirements.txt").exists());
}

#[test]
fn cli_rejects_invalid_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.scenario");
    std::fs::write(&path, "name = \"bad\"\nprotocol = \"ccb\"\n[topology]\nshards = 1\nn = 3\nf = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cerberus")).arg("run").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn cli_sweep_emits_csv() {
    let out = Command::new(env!("CARGO_BIN_EXE_cerberus"))
        .args(["sweep", "--k", "2", "--s", "1,2", "--n", "1024"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("2,1,1024,"));
}
