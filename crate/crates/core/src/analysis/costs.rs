//! Per-protocol cost table, measured costs from traces, and a bandwidth
//! calculator parameterized by message sizes.

use crate::ids::{Protocol, ShardId, Time, TxnId};
use crate::protocol::{Event, RunResult};
use serde::Serialize;
use std::collections::BTreeSet;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProtocolCosts {
    pub protocol: Protocol,
    /// Consensus slots per transaction touching `s` shards is
    /// `consensus_factor * s`.
    pub consensus_factor: u64,
    /// Kinds of cross-shard exchange messages.
    pub exchange: usize,
    /// Consecutive message delays from first proposal to decision.
    pub phases: u64,
    pub conflict_handling: &'static str,
    pub view_change_scope: &'static str,
}

impl ProtocolCosts {
    pub fn consensus_slots(&self, s: u64) -> u64 {
        self.consensus_factor * s
    }
}

pub fn comparison_table() -> Vec<ProtocolCosts> {
    vec![
        ProtocolCosts {
            protocol: Protocol::Ccb,
            consensus_factor: 1,
            exchange: 1,
            phases: 4,
            conflict_handling: "abort; inputs stay pledged",
            view_change_scope: "one shard",
        },
        ProtocolCosts {
            protocol: Protocol::Ocb,
            consensus_factor: 1,
            exchange: 3,
            phases: 3,
            conflict_handling: "global round fails; view change",
            view_change_scope: "all affected shards",
        },
        ProtocolCosts {
            protocol: Protocol::Pcb,
            consensus_factor: 2,
            exchange: 1,
            phases: 7,
            conflict_handling: "abort; inputs restored",
            view_change_scope: "one shard",
        },
    ]
}

pub fn costs_of(p: Protocol) -> ProtocolCosts {
    comparison_table().into_iter().find(|c| c.protocol == p).expect("every protocol has a row")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MeasuredCost {
    pub shards: usize,
    /// Distinct (shard, round) pairs in which the transaction was accepted.
    pub consensus_slots: usize,
    pub exchange: usize,
    /// Elapsed message delays from the first proposal to the last decision,
    /// rounded up.
    pub phases: u64,
    /// Whether every elapsed time was a whole number of delays.
    pub exact: bool,
}

/// Measures `txn` in a run whose in-window delay is fixed at `delta`.
pub fn measure(res: &RunResult, txn: TxnId, delta: Time) -> Option<MeasuredCost> {
    let t = res.catalog.get(&txn)?;
    let mut first: Option<Time> = None;
    let mut last: Option<Time> = None;
    let mut slots: BTreeSet<(ShardId, u64)> = BTreeSet::new();
    for e in &res.events {
        match e {
            Event::Proposed { txn: x, time, replica, .. } if *x == txn && res.is_good(*replica) => {
                first = Some(first.map_or(*time, |f| f.min(*time)));
            }
            Event::Decided { txn: x, time, replica, .. } if *x == txn && res.is_good(*replica) => {
                last = Some(last.map_or(*time, |l| l.max(*time)));
            }
            Event::Accepted { txn: x, replica, round, .. } if *x == txn && res.is_good(*replica) => {
                slots.insert((replica.shard, *round));
            }
            _ => {}
        }
    }
    let (first, last) = (first?, last?);
    let elapsed = last - first;
    Some(MeasuredCost {
        shards: res.topo.shards_of(t).len(),
        consensus_slots: slots.len(),
        exchange: res.cross_shard_types.get(&txn).map(|s| s.len()).unwrap_or(0),
        phases: elapsed.div_ceil(delta),
        exact: elapsed % delta == 0,
    })
}

/// Compares a measurement with the table; returns mismatches.
pub fn conformance(p: Protocol, m: &MeasuredCost) -> Vec<String> {
    let c = costs_of(p);
    let mut w = Vec::new();
    let want = c.consensus_slots(m.shards as u64) as usize;
    if m.consensus_slots != want {
        w.push(format!("{p}: {} consensus slots, table says {want}", m.consensus_slots));
    }
    if m.exchange != c.exchange {
        w.push(format!("{p}: {} exchange kinds, table says {}", m.exchange, c.exchange));
    }
    if m.phases != c.phases || !m.exact {
        w.push(format!("{p}: {} phases (exact: {}), table says {}", m.phases, m.exact, c.phases));
    }
    w
}

/// Bytes each replica sends per message kind. No sizes are built in; the
/// caller has to supply them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MessageSizes {
    pub proposal: u64,
    pub vote: u64,
    pub exchange: u64,
}

/// Throughput bound from one replica's outgoing link: `s` shards, `k`
/// inputs per transaction, `n` replicas per shard, `link_bps` bits/s.
/// Every involved shard's primary broadcasts the proposal, every replica
/// broadcasts two votes per consensus step, and every replica sends its
/// exchange messages to each other involved shard.
pub fn bandwidth_tput(p: Protocol, k: u32, s: u64, n: u64, sizes: &MessageSizes, link_bps: f64) -> f64 {
    let c = costs_of(p);
    let steps = crate::analysis::steps::expected_steps(k, s, 1) * c.consensus_factor as f64;
    let involved = steps / c.consensus_factor as f64;
    // Bytes one replica sends for one transaction its shard takes part in.
    let per_step = 2.0 * (n as f64 - 1.0) * sizes.vote as f64 + (n as f64 - 1.0) * sizes.proposal as f64 / n as f64;
    let exchange = c.exchange as f64 * (involved - 1.0).max(0.0) * n as f64 * sizes.exchange as f64;
    let shard_bytes_per_txn = (steps * per_step + involved * exchange) / s as f64;
    if shard_bytes_per_txn <= 0.0 {
        return f64::INFINITY;
    }
    link_bps / 8.0 / shard_bytes_per_txn
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let t = comparison_table();
        assert_eq!(t.len(), 3);
        assert_eq!(costs_of(Protocol::Pcb).consensus_slots(3), 6);
        assert_eq!(costs_of(Protocol::Ocb).exchange, 3);
    }

    #[test]
    fn bandwidth_scales_with_shards() {
        let sz = MessageSizes { proposal: 1000, vote: 100, exchange: 300 };
        let a = bandwidth_tput(Protocol::Ccb, 2, 4, 7, &sz, 1e8);
        let b = bandwidth_tput(Protocol::Ccb, 2, 64, 7, &sz, 1e8);
        assert!(b > a);
        let pcb = bandwidth_tput(Protocol::Pcb, 2, 4, 7, &sz, 1e8);
        assert!(pcb < a);
    }
}
