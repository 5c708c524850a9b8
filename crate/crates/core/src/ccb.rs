//! Core protocol: one inputs round per shard, a cross-shard pledge exchange,
//! and a local decision. Pledges are never undone.

use crate::consensus::{ClusterReceiver, Proposal, Verdict};
use crate::ids::{Decision, NodeId, ReplicaId, Round, ShardId, Time, TxnId};
use crate::object_model::{Ledger, LedgerExt, ObjectId, ObjectStatus, Transaction};
use crate::pbft_host::{PbftHost, TIMER_PBFT};
use crate::protocol::{Ctx, Event, Msg, Node, SlotKind, Topology};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

pub const TIMER_PULL: u64 = 2;

/// A shard's statement of the inputs `txn` needs there (`inputs`) and those
/// it could pledge (`available`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputsPledge {
    pub txn: Arc<Transaction>,
    pub shard: ShardId,
    pub round: Round,
    pub inputs: BTreeSet<ObjectId>,
    pub available: BTreeSet<ObjectId>,
}

/// Comparable content of a pledge, used for matching copies.
pub type PledgeKey = (Round, Vec<ObjectId>, Vec<ObjectId>);

impl InputsPledge {
    pub fn is_full(&self) -> bool {
        self.inputs == self.available
    }

    pub fn key(&self) -> PledgeKey {
        (self.round, self.inputs.iter().copied().collect(), self.available.iter().copied().collect())
    }

    /// The same pledge with the opposite fullness; what a lying replica sends.
    pub fn flipped(&self) -> InputsPledge {
        let available = if self.is_full() && !self.inputs.is_empty() { BTreeSet::new() } else { self.inputs.clone() };
        InputsPledge { available, ..self.clone() }
    }
}

/// Write-once assignment of objects to the transaction they are pledged to.
#[derive(Clone, Debug, Default)]
pub struct PledgeLedger {
    pub pledged: BTreeMap<ObjectId, TxnId>,
}

impl PledgeLedger {
    pub fn pledge(&mut self, o: ObjectId, t: TxnId) -> bool {
        if self.pledged.contains_key(&o) {
            return false;
        }
        self.pledged.insert(o, t);
        true
    }

    pub fn holder(&self, o: &ObjectId) -> Option<TxnId> {
        self.pledged.get(o).copied()
    }
}

/// Cross-shard exchange state shared with the pessimistic protocol.
pub struct Exchange {
    pub me: ReplicaId,
    pub own: BTreeMap<TxnId, Arc<InputsPledge>>,
    pub remote: BTreeMap<TxnId, BTreeMap<ShardId, Arc<InputsPledge>>>,
    rx: ClusterReceiver<TxnId, PledgeKey>,
    /// Copies seen per (shard, txn, content) so the accepted one can be kept.
    copies: BTreeMap<(ShardId, TxnId, PledgeKey), Arc<InputsPledge>>,
    pulls: BTreeMap<TxnId, u32>,
    /// Earliest time of the next pull per transaction.
    pull_due: BTreeMap<TxnId, Time>,
    /// Transactions whose remote pledges are still missing.
    waiting: BTreeSet<TxnId>,
    pull_armed: bool,
}

impl Exchange {
    pub fn new(me: ReplicaId) -> Self {
        Exchange {
            me,
            own: BTreeMap::new(),
            remote: BTreeMap::new(),
            rx: ClusterReceiver::new(),
            copies: BTreeMap::new(),
            pulls: BTreeMap::new(),
            pull_due: BTreeMap::new(),
            waiting: BTreeSet::new(),
            pull_armed: false,
        }
    }

    /// Records the local pledge and cluster-sends it to the other shards.
    pub fn send_own(&mut self, ctx: &mut Ctx, p: InputsPledge, shards: &BTreeSet<ShardId>) {
        let p = Arc::new(p);
        self.own.insert(p.txn.id, p.clone());
        let msg = Msg::ClusterSend(p.clone());
        for s in shards {
            if *s != self.me.shard {
                ctx.send_shard(*s, &msg);
            }
        }
        if shards.len() > 1 {
            self.waiting.insert(p.txn.id);
        }
    }

    /// Returns the pledge once `f + 1` matching copies arrived.
    pub fn receive(&mut self, ctx: &Ctx, from: NodeId, p: Arc<InputsPledge>) -> Option<Arc<InputsPledge>> {
        let NodeId::Replica(r) = from else { return None };
        if r.shard != p.shard || r.shard == self.me.shard {
            return None;
        }
        let shards = ctx.topo.shards_of(&p.txn);
        if !shards.contains(&self.me.shard) || !shards.contains(&p.shard) {
            return None;
        }
        let key = p.key();
        self.copies.entry((p.shard, p.txn.id, key.clone())).or_insert_with(|| p.clone());
        let cfg = ctx.topo.shard(p.shard);
        let accepted = self.rx.offer(cfg, r.idx, p.txn.id, key.clone())?;
        let p = self.copies.remove(&(p.shard, p.txn.id, accepted))?;
        self.copies.retain(|(s, t, _), _| !(*s == p.shard && *t == p.txn.id));
        self.remote.entry(p.txn.id).or_default().insert(p.shard, p.clone());
        Some(p)
    }

    /// Pledges of every involved shard, own included, if all are known.
    pub fn all(&self, txn: &Transaction, shards: &BTreeSet<ShardId>) -> Option<Vec<Arc<InputsPledge>>> {
        let mut v = Vec::new();
        for s in shards {
            if *s == self.me.shard {
                v.push(self.own.get(&txn.id)?.clone());
            } else {
                v.push(self.remote.get(&txn.id)?.get(s)?.clone());
            }
        }
        Some(v)
    }

    pub fn any_deficient(&self, txn: TxnId) -> bool {
        self.own.get(&txn).map(|p| !p.is_full()).unwrap_or(false)
            || self.remote.get(&txn).map(|m| m.values().any(|p| !p.is_full())).unwrap_or(false)
    }

    pub fn done(&mut self, txn: TxnId) {
        self.waiting.remove(&txn);
        self.pull_due.remove(&txn);
    }

    /// Answers a pull from another shard with our pledge, if we have one.
    pub fn answer_pull(&self, ctx: &mut Ctx, from: NodeId, txn: TxnId) {
        if let Some(p) = self.own.get(&txn) {
            ctx.send(from, Msg::ClusterSend(p.clone()));
        }
    }

    pub fn arm(&mut self, ctx: &mut Ctx) {
        if !self.pull_armed && !self.waiting.is_empty() {
            self.pull_armed = true;
            ctx.timer(ctx.topo.timing.retransmit, TIMER_PULL);
        }
    }

    /// Pulls missing pledges for transactions that are still waiting. The
    /// gap between pulls for one transaction doubles up to 8 retransmit
    /// periods, so the pull budget outlasts long unreliable periods.
    pub fn on_timer(&mut self, ctx: &mut Ctx, known: &BTreeMap<TxnId, Arc<Transaction>>) {
        self.pull_armed = false;
        let max = ctx.topo.timing.max_pulls;
        let retransmit = ctx.topo.timing.retransmit;
        let waiting: Vec<TxnId> = self.waiting.iter().copied().collect();
        for t in waiting {
            if self.pull_due.get(&t).is_some_and(|d| *d > ctx.now) {
                continue;
            }
            let n = self.pulls.entry(t).or_insert(0);
            *n += 1;
            if *n > max {
                self.waiting.remove(&t);
                self.pull_due.remove(&t);
                continue;
            }
            self.pull_due.insert(t, ctx.now + (retransmit << (*n - 1).min(3)));
            let Some(txn) = known.get(&t) else { continue };
            for s in ctx.topo.shards_of(txn) {
                if s == self.me.shard || self.remote.get(&t).map(|m| m.contains_key(&s)).unwrap_or(false) {
                    continue;
                }
                ctx.send_shard(s, &Msg::ExchangePull { txn: txn.clone(), want: s });
            }
        }
        self.arm(ctx);
    }
}

pub struct CcbReplica {
    host: PbftHost,
    ledger: Ledger,
    pledges: PledgeLedger,
    xch: Exchange,
    /// Delivered inputs rounds whose pledge is not computed yet.
    queued: VecDeque<(Round, Arc<Transaction>)>,
    accepted_at: BTreeMap<TxnId, Round>,
    round_txn: BTreeMap<Round, TxnId>,
    decided: BTreeMap<TxnId, Decision>,
    /// Every round below this one is finished.
    next_unfinished: Round,
    finished: BTreeSet<Round>,
    highest_delivered: Round,
    pub objects_lost: u64,
}

impl CcbReplica {
    pub fn new(me: ReplicaId, topo: &Arc<Topology>) -> Self {
        CcbReplica {
            host: PbftHost::new(me, topo),
            ledger: topo.genesis.get(&me.shard).cloned().unwrap_or_default(),
            pledges: PledgeLedger::default(),
            xch: Exchange::new(me),
            queued: VecDeque::new(),
            accepted_at: BTreeMap::new(),
            round_txn: BTreeMap::new(),
            decided: BTreeMap::new(),
            next_unfinished: 1,
            finished: BTreeSet::new(),
            highest_delivered: 0,
            objects_lost: 0,
        }
    }

    fn me(&self) -> ReplicaId {
        self.host.me
    }

    fn verdict(topo: &Topology, shard: ShardId, accepted: &BTreeMap<TxnId, Round>, p: &Proposal) -> Verdict {
        match p {
            Proposal::Null => Verdict::Accept,
            Proposal::Txn(t) if topo.admissible(t, shard).is_ok() && !accepted.contains_key(&t.id) => Verdict::Accept,
            _ => Verdict::Reject,
        }
    }

    fn on_delivered(&mut self, ctx: &mut Ctx, rounds: Vec<(Round, Proposal)>) {
        for (r, p) in rounds {
            self.highest_delivered = r;
            match p {
                Proposal::Txn(t) => {
                    self.host.settle(t.id);
                    self.host.known.entry(t.id).or_insert_with(|| t.clone());
                    self.accepted_at.insert(t.id, r);
                    self.round_txn.insert(r, t.id);
                    ctx.event(Event::Accepted { time: ctx.now, replica: self.me(), txn: t.id, round: r, kind: SlotKind::Inputs });
                    self.queued.push_back((r, t));
                }
                _ => {
                    self.finished.insert(r);
                }
            }
        }
        self.process_queue(ctx);
    }

    /// Availability of `o` for the transaction accepted at round `r`:
    /// `Some(true/false)` once determined, `None` while its producer is
    /// still undecided.
    fn available(&self, o: &ObjectId, r: Round) -> Option<bool> {
        if self.pledges.holder(o).is_some() {
            return Some(false);
        }
        if let Some(rec) = self.ledger.get(o) {
            return Some(rec.status == ObjectStatus::Constructed);
        }
        if o.is_genesis() {
            return Some(false);
        }
        let produced = self.host.known.get(&o.txn).map(|p| p.outputs.iter().any(|(x, _)| x == o)).unwrap_or(false);
        if !produced {
            return Some(false);
        }
        match self.accepted_at.get(&o.txn) {
            Some(rp) if *rp < r => match self.decided.get(&o.txn) {
                Some(Decision::Commit) => Some(true),
                Some(Decision::Abort) => Some(false),
                None => None,
            },
            _ => Some(false),
        }
    }

    /// Turns queued rounds into pledges, in round order. A round waits while
    /// a producer of one of its inputs is undecided, and so does any later
    /// round that shares an input with a waiting one.
    fn process_queue(&mut self, ctx: &mut Ctx) {
        let shard = self.me().shard;
        let mut blocked: BTreeSet<ObjectId> = BTreeSet::new();
        let mut i = 0;
        while i < self.queued.len() {
            let (r, t) = self.queued[i].clone();
            let inputs: BTreeSet<ObjectId> =
                t.inputs.iter().copied().filter(|o| ctx.topo.assign.placement(*o) == shard).collect();
            let mut avail = BTreeSet::new();
            let mut wait = inputs.iter().any(|o| blocked.contains(o));
            if !wait {
                for o in &inputs {
                    match self.available(o, r) {
                        Some(true) => {
                            avail.insert(*o);
                        }
                        Some(false) => {}
                        None => wait = true,
                    }
                }
            }
            if wait {
                blocked.extend(inputs);
                i += 1;
                continue;
            }
            self.queued.remove(i);
            for o in &avail {
                self.pledges.pledge(*o, t.id);
                if self.ledger.contains_key(o) {
                    let _ = self.ledger.pledge(*o);
                }
            }
            let full = avail == inputs;
            ctx.event(Event::Pledged { time: ctx.now, replica: self.me(), txn: t.id, round: r, full });
            let shards = ctx.topo.shards_of(&t);
            let pledge = InputsPledge { txn: t.clone(), shard, round: r, inputs, available: avail };
            self.xch.send_own(ctx, pledge, &shards);
            self.try_decide(ctx, t.id);
        }
    }

    fn try_decide(&mut self, ctx: &mut Ctx, txn: TxnId) {
        if self.decided.contains_key(&txn) {
            return;
        }
        let Some(t) = self.host.known.get(&txn).cloned() else { return };
        let decision = if self.xch.any_deficient(txn) {
            Decision::Abort
        } else if self.xch.all(&t, &ctx.topo.shards_of(&t)).is_some() {
            Decision::Commit
        } else {
            return;
        };
        self.decided.insert(txn, decision);
        self.xch.done(txn);
        let round = self.accepted_at.get(&txn).copied().unwrap_or(0);
        ctx.event(Event::Decided { time: ctx.now, replica: self.me(), txn, decision, round, outcome_round: None });
        if decision == Decision::Abort {
            self.objects_lost += self.pledges.pledged.values().filter(|h| **h == txn).count() as u64;
            self.inform(ctx, &t, decision);
        }
        // A decision can unblock rounds that consume this transaction's outputs.
        self.process_queue(ctx);
        self.execute(ctx);
    }

    /// Finishes rounds in order: aborts and null rounds are finished once
    /// known, commits execute only after every earlier round has finished.
    fn execute(&mut self, ctx: &mut Ctx) {
        let shard = self.me().shard;
        loop {
            let r = self.next_unfinished;
            if r > self.highest_delivered {
                break;
            }
            if self.finished.contains(&r) {
                self.next_unfinished += 1;
                continue;
            }
            let Some(txn) = self.round_txn.get(&r).copied() else { break };
            if !self.xch.own.contains_key(&txn) {
                break;
            }
            match self.decided.get(&txn) {
                Some(Decision::Abort) => {}
                Some(Decision::Commit) => {
                    let t = self.host.known[&txn].clone();
                    let own = self.xch.own[&txn].clone();
                    let mut consumed = Vec::new();
                    for o in &own.available {
                        if self.ledger.destruct(*o).is_ok() {
                            consumed.push(*o);
                        }
                    }
                    let mut constructed = Vec::new();
                    for (o, owner) in &t.outputs {
                        if ctx.topo.assign.placement(*o) == shard && self.ledger.construct(*o, *owner, r).is_ok() {
                            if self.pledges.holder(o).is_some() {
                                let _ = self.ledger.pledge(*o);
                            }
                            constructed.push(*o);
                        }
                    }
                    ctx.event(Event::Applied { time: ctx.now, replica: self.me(), txn, consumed, constructed });
                    self.inform(ctx, &t, Decision::Commit);
                }
                None => break,
            }
            self.finished.insert(r);
            self.next_unfinished += 1;
        }
        self.finished.retain(|x| *x >= self.next_unfinished);
    }

    fn inform(&self, ctx: &mut Ctx, t: &Transaction, d: Decision) {
        ctx.send(NodeId::Client(t.client), Msg::Inform { txn: t.id, shard: self.me().shard, decision: d });
    }

    /// Decision visible to clients: commits only after execution.
    fn informed(&self, txn: TxnId) -> Option<Decision> {
        match self.decided.get(&txn)? {
            Decision::Abort => Some(Decision::Abort),
            Decision::Commit => {
                let r = self.accepted_at.get(&txn)?;
                (*r < self.next_unfinished).then_some(Decision::Commit)
            }
        }
    }

    fn settle(&mut self, ctx: &mut Ctx) {
        let delivered = self.host.propose(ctx, &[]);
        if !delivered.is_empty() {
            self.on_delivered(ctx, delivered);
        }
        self.host.arm(ctx, false);
        self.xch.arm(ctx);
    }
}

impl Node for CcbReplica {
    fn on_message(&mut self, ctx: &mut Ctx, from: NodeId, msg: Msg) {
        match msg {
            Msg::Request(t) => {
                if let Some(d) = self.informed(t.id) {
                    self.inform(ctx, &t, d);
                } else if !self.accepted_at.contains_key(&t.id) {
                    self.host.learn(ctx, &t);
                }
            }
            Msg::Pbft { msg, .. } => {
                let topo = self.host.topo.clone();
                let shard = self.me().shard;
                let accepted = &self.accepted_at;
                let check = |_: Round, p: &Proposal| CcbReplica::verdict(&topo, shard, accepted, p);
                let delivered = self.host.on_pbft(ctx, from, &msg, &check);
                self.on_delivered(ctx, delivered);
            }
            Msg::ClusterSend(p) => {
                let txn = p.txn.clone();
                if let Some(p) = self.xch.receive(ctx, from, p) {
                    if !self.accepted_at.contains_key(&txn.id) && !self.host.known.contains_key(&txn.id) {
                        self.host.learn(ctx, &txn);
                    }
                    self.try_decide(ctx, p.txn.id);
                }
            }
            Msg::ExchangePull { txn, want } => {
                if want != self.me().shard {
                    return;
                }
                if self.xch.own.contains_key(&txn.id) {
                    self.xch.answer_pull(ctx, from, txn.id);
                } else if !self.accepted_at.contains_key(&txn.id) {
                    self.host.learn(ctx, &txn);
                }
            }
            Msg::Inform { .. } | Msg::Ocb(_) => {}
        }
        self.settle(ctx);
    }

    fn on_timer(&mut self, ctx: &mut Ctx, id: u64) {
        match id {
            TIMER_PBFT => {
                let delivered = self.host.on_timer(ctx, false);
                self.on_delivered(ctx, delivered);
            }
            TIMER_PULL => {
                let known = self.host.known.clone();
                self.xch.on_timer(ctx, &known);
            }
            _ => {}
        }
        self.settle(ctx);
    }

    fn ledger(&self) -> Option<&Ledger> {
        Some(&self.ledger)
    }
}
