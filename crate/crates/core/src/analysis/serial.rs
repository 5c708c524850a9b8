//! Precedence graph over committed transactions, topological ordering,
//! replay, and a brute-force oracle for small traces.

use crate::ids::TxnId;
use crate::object_model::{Ledger, LedgerExt, ObjectId, ObjectStatus, Transaction};
use crate::protocol::RunResult;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

/// `a -> b` iff some output of `a` is an input of `b`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrecedenceGraph {
    pub nodes: BTreeSet<TxnId>,
    pub edges: BTreeSet<(TxnId, TxnId)>,
}

impl PrecedenceGraph {
    pub fn build(txns: &[Arc<Transaction>]) -> Self {
        let mut producer: BTreeMap<ObjectId, TxnId> = BTreeMap::new();
        for t in txns {
            for (o, _) in &t.outputs {
                producer.insert(*o, t.id);
            }
        }
        let mut g = PrecedenceGraph { nodes: txns.iter().map(|t| t.id).collect(), ..Default::default() };
        for t in txns {
            for o in &t.inputs {
                if let Some(p) = producer.get(o) {
                    g.edges.insert((*p, t.id));
                }
            }
        }
        g
    }

    /// Kahn's algorithm with smallest-id tie breaking. On a cycle, returns
    /// one cycle as witness.
    pub fn topological_order(&self) -> Result<Vec<TxnId>, Vec<TxnId>> {
        let mut indeg: BTreeMap<TxnId, usize> = self.nodes.iter().map(|n| (*n, 0)).collect();
        let mut succ: BTreeMap<TxnId, Vec<TxnId>> = BTreeMap::new();
        for (a, b) in &self.edges {
            *indeg.get_mut(b).expect("edge endpoints are nodes") += 1;
            succ.entry(*a).or_default().push(*b);
        }
        let mut ready: BTreeSet<TxnId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for m in succ.get(&n).into_iter().flatten() {
                let d = indeg.get_mut(m).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(*m);
                }
            }
        }
        if order.len() == self.nodes.len() {
            return Ok(order);
        }
        let left: BTreeSet<TxnId> = indeg.iter().filter(|(_, d)| **d > 0).map(|(n, _)| *n).collect();
        Err(self.find_cycle(&left))
    }

    fn find_cycle(&self, within: &BTreeSet<TxnId>) -> Vec<TxnId> {
        // Every remaining node has a predecessor among the remaining ones, so
        // walking predecessors must revisit a node.
        let pred = |n: TxnId| self.edges.iter().find(|(a, b)| *b == n && within.contains(a)).map(|(a, _)| *a);
        let Some(start) = within.first().copied() else { return vec![] };
        let mut seen = vec![start];
        let mut cur = start;
        while let Some(p) = pred(cur) {
            if let Some(pos) = seen.iter().position(|x| *x == p) {
                let mut cyc: Vec<TxnId> = seen[pos..].to_vec();
                cyc.reverse();
                return cyc;
            }
            seen.push(p);
            cur = p;
        }
        seen
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SerialError {
    #[error("precedence cycle {0:?}")]
    Cycle(Vec<TxnId>),
    #[error("replay of {txn} finds input {object} missing")]
    Replay { txn: TxnId, object: ObjectId },
}

/// Applies `order` to `start`; every input must be live when consumed.
pub fn replay(start: &Ledger, order: &[Arc<Transaction>]) -> Result<Ledger, SerialError> {
    let mut l = start.clone();
    for t in order {
        for o in &t.inputs {
            let live = l.get(o).map(|r| r.status == ObjectStatus::Constructed).unwrap_or(false);
            if !live {
                return Err(SerialError::Replay { txn: t.id, object: *o });
            }
        }
        for o in &t.inputs {
            let _ = l.destruct(*o);
        }
        for (o, owner) in &t.outputs {
            l.construct(*o, *owner, 0).map_err(|_| SerialError::Replay { txn: t.id, object: *o })?;
        }
    }
    Ok(l)
}

/// Union of every shard's initial ledger.
pub fn genesis_ledger(res: &RunResult) -> Ledger {
    res.topo.genesis.values().flat_map(|l| l.iter().map(|(k, v)| (*k, v.clone()))).collect()
}

pub fn committed_txns(res: &RunResult) -> Vec<Arc<Transaction>> {
    res.committed().iter().filter_map(|t| res.catalog.get(t).cloned()).collect()
}

/// Topological order of the committed transactions, checked by replay.
pub fn check_serializable(res: &RunResult) -> Result<Vec<TxnId>, SerialError> {
    let txns = committed_txns(res);
    let order = PrecedenceGraph::build(&txns).topological_order().map_err(SerialError::Cycle)?;
    let by_id: BTreeMap<TxnId, Arc<Transaction>> = txns.into_iter().map(|t| (t.id, t)).collect();
    let seq: Vec<_> = order.iter().map(|t| by_id[t].clone()).collect();
    replay(&genesis_ledger(res), &seq)?;
    Ok(order)
}

/// Every permutation of `txns` that replays cleanly from `start`.
/// Exponential; meant for at most a handful of transactions.
pub fn valid_serial_orders(start: &Ledger, txns: &[Arc<Transaction>]) -> Vec<Vec<TxnId>> {
    assert!(txns.len() <= 8, "exhaustive search is limited to 8 transactions");
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..txns.len()).collect();
    permute(&mut idx, 0, &mut |p| {
        let seq: Vec<_> = p.iter().map(|i| txns[*i].clone()).collect();
        if replay(start, &seq).is_ok() {
            out.push(seq.iter().map(|t| t.id).collect());
        }
    });
    out.sort();
    out
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ClientId;

    fn txn(id: u64, inputs: &[ObjectId], outs: usize) -> Arc<Transaction> {
        let owners = vec![ClientId(1); outs];
        Arc::new(Transaction::new(TxnId(id), ClientId(1), inputs.iter().copied(), &owners, BTreeMap::new()).unwrap())
    }

    fn genesis(n: u32) -> Ledger {
        let mut l = Ledger::new();
        for i in 0..n {
            l.construct(ObjectId::genesis(i), ClientId(1), 0).unwrap();
        }
        l
    }

    #[test]
    fn chain_orders_producer_first() {
        let a = txn(5, &[ObjectId::genesis(0)], 1);
        let b = txn(2, &[ObjectId::new(TxnId(5), 0)], 1);
        let g = PrecedenceGraph::build(&[b.clone(), a.clone()]);
        assert_eq!(g.topological_order().unwrap(), vec![TxnId(5), TxnId(2)]);
        assert!(replay(&genesis(1), &[a, b]).is_ok());
    }

    #[test]
    fn cycle_is_reported() {
        let a = txn(1, &[ObjectId::new(TxnId(2), 0)], 1);
        let b = txn(2, &[ObjectId::new(TxnId(1), 0)], 1);
        let c = txn(3, &[ObjectId::genesis(0)], 1);
        let err = PrecedenceGraph::build(&[a, b, c]).topological_order().unwrap_err();
        let set: BTreeSet<_> = err.into_iter().collect();
        assert_eq!(set, [TxnId(1), TxnId(2)].into());
    }

    #[test]
    fn double_spend_has_no_serial_order() {
        let a = txn(1, &[ObjectId::genesis(0)], 1);
        let b = txn(2, &[ObjectId::genesis(0)], 1);
        assert!(valid_serial_orders(&genesis(1), &[a, b]).is_empty());
    }

    #[test]
    fn independent_txns_admit_every_order() {
        let ts: Vec<_> = (0..3).map(|i| txn(i + 1, &[ObjectId::genesis(i as u32)], 1)).collect();
        assert_eq!(valid_serial_orders(&genesis(3), &ts).len(), 6);
    }
}
