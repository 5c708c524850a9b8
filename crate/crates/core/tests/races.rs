//! Two conflicting transactions from one malicious client, each reaching a
//! different shard first.

mod common;

use cerberus::harness::scenario::TxnSpec;
use cerberus::harness::Scenario;
use cerberus::ids::{Decision, ShardId, TxnId};
use cerberus::object_model::ObjectStatus;
use cerberus::protocol::{run, RunResult};
use common::bundled;

fn status_everywhere(r: &RunResult, sc: &Scenario, name: &str, shard: u32) -> Vec<ObjectStatus> {
    let o = sc.object(name);
    r.ledgers
        .iter()
        .filter(|(rep, _)| rep.shard == ShardId(shard) && r.is_good(**rep))
        .map(|(_, l)| l[&o].status)
        .collect()
}

fn aborted_everywhere(r: &RunResult, t: u64) -> bool {
    let d = r.decisions(TxnId(t));
    d.len() == 2 && d.values().all(|s| s.len() == 1 && s.contains(&Decision::Abort))
}

/// The race plus an honest follow-up spending `o1` once everything settled.
fn with_follow_up(name: &str) -> Scenario {
    let mut file = bundled(name).file;
    file.txns.push(TxnSpec {
        id: 3,
        client: 1,
        inputs: vec!["o1".into()],
        outputs: vec![2],
        output_shards: vec![0],
        at: 5_000,
        targets: None,
        forge: vec![],
        omit: vec![],
    });
    Scenario::from_file(file).unwrap()
}

#[test]
fn core_race_leaves_inputs_pledged() {
    let sc = bundled("ccb_race.scenario");
    let r = run(sc.config.clone());
    assert!(r.quiescent);
    assert!(aborted_everywhere(&r, 1));
    assert!(aborted_everywhere(&r, 2));
    assert!(status_everywhere(&r, &sc, "o1", 0).iter().all(|s| *s == ObjectStatus::Pledged));
    assert!(status_everywhere(&r, &sc, "o2", 1).iter().all(|s| *s == ObjectStatus::Pledged));
}

#[test]
fn core_race_inputs_stay_unusable() {
    let sc = with_follow_up("ccb_race.scenario");
    let r = run(sc.config.clone());
    let d = r.decisions(TxnId(3));
    assert_eq!(d.get(&ShardId(0)), Some(&[Decision::Abort].into()));
    assert!(!r.committed().contains(&TxnId(3)));
}

#[test]
fn pessimistic_race_restores_inputs() {
    let sc = bundled("pcb_race.scenario");
    let r = run(sc.config.clone());
    assert!(r.quiescent);
    assert!(aborted_everywhere(&r, 1));
    assert!(aborted_everywhere(&r, 2));
    assert!(status_everywhere(&r, &sc, "o1", 0).iter().all(|s| *s == ObjectStatus::Constructed));
    assert!(status_everywhere(&r, &sc, "o2", 1).iter().all(|s| *s == ObjectStatus::Constructed));
}

#[test]
fn pessimistic_race_restored_input_is_spendable() {
    let sc = with_follow_up("pcb_race.scenario");
    let r = run(sc.config.clone());
    assert!(r.committed().contains(&TxnId(3)));
    assert!(status_everywhere(&r, &sc, "o1", 0).iter().all(|s| *s == ObjectStatus::Destructed));
}

#[test]
fn optimistic_race_changes_views_and_commits_nothing() {
    let sc = bundled("ocb_race.scenario");
    let r = run(sc.config.clone());
    assert!(r.view_changes(ShardId(0)) > 0);
    assert!(r.view_changes(ShardId(1)) > 0);
    assert!(r.committed().is_empty());
    assert!(r.decisions(TxnId(1)).values().all(|s| !s.contains(&Decision::Commit)));
    assert!(r.decisions(TxnId(2)).values().all(|s| !s.contains(&Decision::Commit)));
}

#[test]
fn race_runs_are_safe() {
    use cerberus::analysis::{check_requirements, LivenessScope};
    for n in ["ccb_race.scenario", "pcb_race.scenario", "ocb_race.scenario"] {
        let r = run(bundled(n).config);
        let rep = check_requirements(&r, LivenessScope::Skip);
        assert!(rep.safety_ok(), "{n}: {rep}");
    }
}
