//! Checkers flag hand-corrupted traces, and runs are reproducible.

mod common;

use cerberus::analysis::{check_requirements, Check, LivenessScope, Status};
use cerberus::harness::fuzz::{generate, FuzzConfig, FuzzMode};
use cerberus::harness::Scenario;
use cerberus::ids::{Decision, Protocol, TxnId};
use cerberus::protocol::{run, Event, RunResult};

fn committed_run(p: Protocol) -> RunResult {
    let r = run(common::single_multishard(p, 2).config);
    assert!(r.committed().contains(&TxnId(1)));
    assert!(check_requirements(&r, LivenessScope::Everything).ok());
    r
}

fn fails(r: &RunResult, c: Check) -> bool {
    matches!(check_requirements(r, LivenessScope::Everything).status(c), Status::Fail(_))
}

#[test]
fn flipped_decision_breaks_uniformity() {
    for p in [Protocol::Ccb, Protocol::Ocb, Protocol::Pcb] {
        let mut r = committed_run(p);
        let e = r.events.iter_mut().find(|e| matches!(e, Event::Decided { .. })).unwrap();
        if let Event::Decided { decision, .. } = e {
            *decision = Decision::Abort;
        }
        assert!(fails(&r, Check::R4Uniform), "{p}");
    }
}

#[test]
fn dropped_decision_breaks_service() {
    let mut r = committed_run(Protocol::Pcb);
    let i = r.events.iter().position(|e| matches!(e, Event::Decided { .. })).unwrap();
    r.events.remove(i);
    assert!(fails(&r, Check::R5Service));
}

#[test]
fn skipped_consumption_breaks_applicability() {
    let mut r = committed_run(Protocol::Ccb);
    for e in r.events.iter_mut() {
        if let Event::Applied { consumed, .. } = e {
            consumed.clear();
        }
    }
    assert!(fails(&r, Check::R3Applicability));
}

#[test]
fn double_spend_breaks_serializability() {
    let mut r = committed_run(Protocol::Pcb);
    let t1 = r.catalog[&TxnId(1)].clone();
    let mut twin = (*t1).clone();
    twin.id = TxnId(99);
    r.catalog.insert(twin.id, std::sync::Arc::new(twin));
    let extra: Vec<Event> = r
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Decided { time, replica, decision: Decision::Commit, round, outcome_round, .. } => Some(Event::Decided {
                time: *time,
                replica: *replica,
                txn: TxnId(99),
                decision: Decision::Commit,
                round: *round,
                outcome_round: *outcome_round,
            }),
            _ => None,
        })
        .collect();
    r.events.extend(extra);
    assert!(fails(&r, Check::Serializable));
}

#[test]
fn same_seed_same_trace() {
    for p in [Protocol::Ccb, Protocol::Ocb, Protocol::Pcb] {
        let sc = Scenario::from_file(generate(&FuzzConfig::new(p, FuzzMode::Adversarial), 11)).unwrap();
        let a = run(sc.config.clone()).trace.to_jsonl();
        let b = run(sc.config.clone()).trace.to_jsonl();
        assert_eq!(a, b, "{p}");
        let c = run(sc.clone().with_seed(12).config).trace.to_jsonl();
        assert_ne!(a, c, "{p}: the network seed should matter");
    }
}

#[test]
fn generated_scenarios_round_trip() {
    for seed in 0..5 {
        let f = generate(&FuzzConfig::new(Protocol::Ocb, FuzzMode::Attack), seed);
        let sc = Scenario::from_file(f).unwrap();
        let again = Scenario::parse(&sc.to_toml()).unwrap();
        assert_eq!(run(sc.config).trace.to_jsonl(), run(again.config).trace.to_jsonl());
    }
}
