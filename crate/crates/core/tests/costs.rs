mod common;

use cerberus::analysis::costs::{conformance, costs_of, measure};
use cerberus::ids::{Decision, Protocol, TxnId};
use cerberus::protocol::run;

fn check(p: Protocol, s: u32) {
    let r = run(common::single_multishard(p, s).config);
    assert!(r.decisions(TxnId(1)).values().all(|d| d == &[Decision::Commit].into()), "{p} s={s} did not commit");
    let m = measure(&r, TxnId(1), 10).expect("txn was proposed and decided");
    assert_eq!(m.shards, s as usize);
    let bad = conformance(p, &m);
    assert!(bad.is_empty(), "{p} s={s}: {bad:?}");
}

#[test]
fn core_costs_match_table() {
    for s in 2..=4 {
        check(Protocol::Ccb, s);
    }
}

#[test]
fn optimistic_costs_match_table() {
    for s in 2..=4 {
        check(Protocol::Ocb, s);
    }
}

#[test]
fn pessimistic_costs_match_table() {
    for s in 2..=4 {
        check(Protocol::Pcb, s);
    }
}

#[test]
fn table_values() {
    let c = costs_of(Protocol::Ccb);
    assert_eq!((c.consensus_slots(3), c.exchange, c.phases), (3, 1, 4));
    let o = costs_of(Protocol::Ocb);
    assert_eq!((o.consensus_slots(3), o.exchange, o.phases), (3, 3, 3));
    let p = costs_of(Protocol::Pcb);
    assert_eq!((p.consensus_slots(3), p.exchange, p.phases), (6, 1, 7));
}
