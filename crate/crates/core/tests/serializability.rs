//! The topological serializability check agrees with brute force on small
//! random runs.

use cerberus::analysis::serial::{committed_txns, genesis_ledger, replay, valid_serial_orders, PrecedenceGraph};
use cerberus::analysis::check_serializable;
use cerberus::harness::fuzz::{generate, FuzzConfig, FuzzMode};
use cerberus::harness::Scenario;
use cerberus::ids::{ClientId, Protocol, TxnId};
use cerberus::object_model::{Ledger, LedgerExt, ObjectId, Transaction};
use cerberus::protocol::run;
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::sync::Arc;

fn small(p: Protocol, mode: FuzzMode) -> FuzzConfig {
    let mut c = FuzzConfig::new(p, mode);
    c.max_txns = 6;
    c.shards = 2;
    c.n = 4;
    c.f = 1;
    c
}

#[test]
fn oracle_agrees_on_small_runs() {
    let mut nonempty = 0;
    for p in [Protocol::Ccb, Protocol::Ocb, Protocol::Pcb] {
        for mode in [FuzzMode::Adversarial, FuzzMode::Optimistic] {
            for seed in 0..20 {
                let sc = Scenario::from_file(generate(&small(p, mode), seed)).unwrap();
                let r = run(sc.config);
                let txns = committed_txns(&r);
                assert!(txns.len() <= 8);
                let orders = valid_serial_orders(&genesis_ledger(&r), &txns);
                let order = check_serializable(&r).unwrap_or_else(|e| panic!("{p} seed {seed}: {e}"));
                assert!(orders.contains(&order), "{p} seed {seed}: {order:?} not among {orders:?}");
                nonempty += usize::from(!txns.is_empty());
            }
        }
    }
    assert!(nonempty > 50);
}

fn txn(id: u64, inputs: Vec<ObjectId>, outs: usize) -> Arc<Transaction> {
    let owners = vec![ClientId(1); outs];
    Arc::new(Transaction::new(TxnId(id), ClientId(1), inputs, &owners, BTreeMap::new()).unwrap())
}

/// Random transactions over four genesis objects and earlier outputs.
fn txn_set() -> impl Strategy<Value = Vec<Arc<Transaction>>> {
    prop::collection::vec((prop::collection::vec(0usize..12, 1..3), 1usize..3), 1..6).prop_map(|specs| {
        let mut made: Vec<ObjectId> = (0..4).map(ObjectId::genesis).collect();
        let mut out = Vec::new();
        for (i, (picks, outs)) in specs.into_iter().enumerate() {
            let id = i as u64 + 1;
            let inputs: Vec<ObjectId> = picks.iter().map(|k| made[k % made.len()]).collect();
            let t = txn(id, inputs, outs);
            made.extend(t.outputs.iter().map(|(o, _)| *o));
            out.push(t);
        }
        out
    })
}

fn genesis() -> Ledger {
    let mut l = Ledger::new();
    for i in 0..4 {
        l.construct(ObjectId::genesis(i), ClientId(1), 0).unwrap();
    }
    l
}

proptest! {
    #[test]
    fn topological_order_replays_iff_some_order_does(ts in txn_set()) {
        let brute = valid_serial_orders(&genesis(), &ts);
        let topo = PrecedenceGraph::build(&ts).topological_order().ok();
        let by_id: BTreeMap<TxnId, Arc<Transaction>> = ts.iter().map(|t| (t.id, t.clone())).collect();
        let topo_ok = topo.as_ref().map(|o| {
            let seq: Vec<_> = o.iter().map(|t| by_id[t].clone()).collect();
            replay(&genesis(), &seq).is_ok()
        }).unwrap_or(false);
        prop_assert_eq!(topo_ok, !brute.is_empty());
        if topo_ok {
            prop_assert!(brute.contains(topo.as_ref().unwrap()));
        }
    }

    #[test]
    fn topological_order_respects_edges(ts in txn_set()) {
        let g = PrecedenceGraph::build(&ts);
        if let Ok(order) = g.topological_order() {
            let pos: BTreeMap<TxnId, usize> = order.iter().enumerate().map(|(i, t)| (*t, i)).collect();
            for (a, b) in &g.edges {
                prop_assert!(pos[a] < pos[b]);
            }
        }
    }
}
