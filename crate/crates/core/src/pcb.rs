//! Pessimistic protocol: pledging destroys the inputs, a second consensus
//! step fixes the outcome, and an abort puts the inputs back.

use crate::ccb::{Exchange, InputsPledge};
use crate::consensus::{Proposal, Verdict};
use crate::ids::{Decision, NodeId, ReplicaId, Round, ShardId, TxnId};
use crate::object_model::{local_inputs, Ledger, LedgerExt, ObjectRecord, Transaction};
use crate::pbft_host::{PbftHost, TIMER_PBFT};
use crate::protocol::{Ctx, Event, Msg, Node, SlotKind, Topology};
use crate::ccb::TIMER_PULL;
use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

/// Inputs destroyed by phase one, kept until the outcome round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingDestruction {
    pub txn: TxnId,
    pub shard: ShardId,
    /// Records as they were before destruction.
    pub destroyed: Vec<ObjectRecord>,
    pub since_round: Round,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Outcome {
    decision: Decision,
    pledge_round: Round,
    outcome_round: Option<Round>,
}

pub struct PcbReplica {
    host: PbftHost,
    ledger: Ledger,
    xch: Exchange,
    accepted_at: BTreeMap<TxnId, Round>,
    pending: BTreeMap<TxnId, PendingDestruction>,
    /// Outcomes this replica can justify but that are not decided yet.
    known_outcome: BTreeMap<TxnId, bool>,
    decided: BTreeMap<TxnId, Outcome>,
    /// Delivered rounds not yet executed. Executing one round can deliver
    /// more; they queue behind it so execution stays in round order.
    inbox: VecDeque<(Round, Proposal)>,
    draining: bool,
}

impl PcbReplica {
    pub fn new(me: ReplicaId, topo: &Arc<Topology>) -> Self {
        PcbReplica {
            host: PbftHost::new(me, topo),
            ledger: topo.genesis.get(&me.shard).cloned().unwrap_or_default(),
            xch: Exchange::new(me),
            accepted_at: BTreeMap::new(),
            pending: BTreeMap::new(),
            known_outcome: BTreeMap::new(),
            decided: BTreeMap::new(),
            inbox: VecDeque::new(),
            draining: false,
        }
    }

    fn me(&self) -> ReplicaId {
        self.host.me
    }

    pub fn pending_destructions(&self) -> impl Iterator<Item = &PendingDestruction> {
        self.pending.values()
    }

    fn verdict(
        topo: &Topology,
        shard: ShardId,
        accepted: &BTreeMap<TxnId, Round>,
        pending: &BTreeMap<TxnId, PendingDestruction>,
        known: &BTreeMap<TxnId, bool>,
        p: &Proposal,
    ) -> Verdict {
        match p {
            Proposal::Null => Verdict::Accept,
            Proposal::Txn(t) => {
                if topo.admissible(t, shard).is_ok() && !accepted.contains_key(&t.id) {
                    Verdict::Accept
                } else {
                    Verdict::Reject
                }
            }
            Proposal::Outcome { txn, commit } => {
                if !pending.contains_key(txn) {
                    // Either our own first step is not delivered yet, or
                    // there is nothing to decide.
                    return if accepted.contains_key(txn) { Verdict::Reject } else { Verdict::Defer };
                }
                match known.get(txn) {
                    Some(k) if k == commit => Verdict::Accept,
                    Some(_) => Verdict::Reject,
                    None => Verdict::Defer,
                }
            }
        }
    }

    fn decide(&mut self, ctx: &mut Ctx, t: &Transaction, o: Outcome) {
        self.decided.insert(t.id, o);
        self.known_outcome.remove(&t.id);
        self.xch.done(t.id);
        ctx.event(Event::Decided {
            time: ctx.now,
            replica: self.me(),
            txn: t.id,
            decision: o.decision,
            round: o.pledge_round,
            outcome_round: o.outcome_round,
        });
        ctx.send(NodeId::Client(t.client), Msg::Inform { txn: t.id, shard: self.me().shard, decision: o.decision });
    }

    fn construct_outputs(&mut self, ctx: &Ctx, t: &Transaction, round: Round) -> Vec<crate::object_model::ObjectId> {
        let mut out = Vec::new();
        for (o, owner) in &t.outputs {
            if ctx.topo.assign.placement(*o) == self.me().shard && self.ledger.construct(*o, *owner, round).is_ok() {
                out.push(*o);
            }
        }
        out
    }

    fn on_delivered(&mut self, ctx: &mut Ctx, rounds: Vec<(Round, Proposal)>) {
        self.inbox.extend(rounds);
        if self.draining {
            return;
        }
        self.draining = true;
        while let Some((r, p)) = self.inbox.pop_front() {
            match p {
                Proposal::Null => {}
                Proposal::Txn(t) => self.first_step(ctx, r, t),
                Proposal::Outcome { txn, commit } => self.second_step(ctx, r, txn, commit),
            }
        }
        self.draining = false;
    }

    fn first_step(&mut self, ctx: &mut Ctx, r: Round, t: Arc<Transaction>) {
        let me = self.me();
        self.host.settle(t.id);
        self.host.known.entry(t.id).or_insert_with(|| t.clone());
        self.accepted_at.insert(t.id, r);
        ctx.event(Event::Accepted { time: ctx.now, replica: me, txn: t.id, round: r, kind: SlotKind::Inputs });
        let Ok((inputs, avail)) = local_inputs(&t, me.shard, &ctx.topo.assign, &self.ledger) else { return };
        let full = inputs == avail;
        ctx.event(Event::Pledged { time: ctx.now, replica: me, txn: t.id, round: r, full });
        let shards = ctx.topo.shards_of(&t);
        let single = shards.len() == 1;
        let pledge = InputsPledge { txn: t.clone(), shard: me.shard, round: r, inputs: inputs.clone(), available: avail.clone() };
        if full {
            let mut destroyed = Vec::new();
            for o in &inputs {
                if let Ok(rec) = self.ledger.destruct(*o) {
                    destroyed.push(rec);
                }
            }
            let consumed: Vec<_> = destroyed.iter().map(|d| d.id).collect();
            if single {
                let constructed = self.construct_outputs(ctx, &t, r);
                ctx.event(Event::Applied { time: ctx.now, replica: me, txn: t.id, consumed, constructed });
                let o = Outcome { decision: Decision::Commit, pledge_round: r, outcome_round: Some(r) };
                self.decide(ctx, &t, o);
                return;
            }
            ctx.event(Event::Applied { time: ctx.now, replica: me, txn: t.id, consumed, constructed: vec![] });
            self.pending.insert(t.id, PendingDestruction { txn: t.id, shard: me.shard, destroyed, since_round: r });
        }
        if !single {
            self.xch.send_own(ctx, pledge, &shards);
        }
        if !full {
            let o = Outcome { decision: Decision::Abort, pledge_round: r, outcome_round: None };
            self.decide(ctx, &t, o);
            return;
        }
        self.check_outcome(ctx, t.id);
    }

    /// Once every pledge is full, or one is deficient, the outcome is known
    /// and can be agreed on.
    fn check_outcome(&mut self, ctx: &mut Ctx, txn: TxnId) {
        if !self.pending.contains_key(&txn) || self.known_outcome.contains_key(&txn) {
            return;
        }
        let t = self.host.known[&txn].clone();
        let commit = if self.xch.any_deficient(txn) {
            false
        } else if self.xch.all(&t, &ctx.topo.shards_of(&t)).is_some() {
            true
        } else {
            return;
        };
        self.known_outcome.insert(txn, commit);
        let delivered = self.recheck(ctx);
        self.on_delivered(ctx, delivered);
    }

    fn recheck(&mut self, ctx: &mut Ctx) -> Vec<(Round, Proposal)> {
        let topo = self.host.topo.clone();
        let shard = self.me().shard;
        let (accepted, pending, known) = (&self.accepted_at, &self.pending, &self.known_outcome);
        let check = |_: Round, p: &Proposal| PcbReplica::verdict(&topo, shard, accepted, pending, known, p);
        self.host.recheck(ctx, &check)
    }

    fn second_step(&mut self, ctx: &mut Ctx, r: Round, txn: TxnId, commit: bool) {
        let me = self.me();
        let Some(pd) = self.pending.remove(&txn) else { return };
        let t = self.host.known[&txn].clone();
        ctx.event(Event::Accepted { time: ctx.now, replica: me, txn, round: r, kind: SlotKind::Outcome });
        let decision = if commit {
            let constructed = self.construct_outputs(ctx, &t, r);
            ctx.event(Event::Applied { time: ctx.now, replica: me, txn, consumed: vec![], constructed });
            Decision::Commit
        } else {
            let mut restored = Vec::new();
            for rec in pd.destroyed {
                let id = rec.id;
                if self.ledger.restore(rec).is_ok() {
                    restored.push(id);
                }
            }
            ctx.event(Event::RolledBack { time: ctx.now, replica: me, txn, restored });
            Decision::Abort
        };
        let o = Outcome { decision, pledge_round: pd.since_round, outcome_round: Some(r) };
        self.decide(ctx, &t, o);
    }

    fn settle(&mut self, ctx: &mut Ctx) {
        let extra: Vec<Proposal> =
            self.known_outcome.iter().map(|(t, c)| Proposal::Outcome { txn: *t, commit: *c }).collect();
        let delivered = self.host.propose(ctx, &extra);
        if !delivered.is_empty() {
            self.on_delivered(ctx, delivered);
        }
        let work = !self.known_outcome.is_empty();
        self.host.arm(ctx, work);
        self.xch.arm(ctx);
    }
}

impl Node for PcbReplica {
    fn on_message(&mut self, ctx: &mut Ctx, from: NodeId, msg: Msg) {
        match msg {
            Msg::Request(t) => {
                if let Some(o) = self.decided.get(&t.id) {
                    ctx.send(NodeId::Client(t.client), Msg::Inform { txn: t.id, shard: self.me().shard, decision: o.decision });
                } else if !self.accepted_at.contains_key(&t.id) {
                    self.host.learn(ctx, &t);
                }
            }
            Msg::Pbft { msg, .. } => {
                let topo = self.host.topo.clone();
                let shard = self.me().shard;
                let (accepted, pending, known) = (&self.accepted_at, &self.pending, &self.known_outcome);
                let check = |_: Round, p: &Proposal| PcbReplica::verdict(&topo, shard, accepted, pending, known, p);
                let delivered = self.host.on_pbft(ctx, from, &msg, &check);
                self.on_delivered(ctx, delivered);
            }
            Msg::ClusterSend(p) => {
                let txn = p.txn.clone();
                if self.xch.receive(ctx, from, p).is_some() {
                    if !self.accepted_at.contains_key(&txn.id) && !self.host.known.contains_key(&txn.id) {
                        self.host.learn(ctx, &txn);
                    }
                    self.check_outcome(ctx, txn.id);
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
                let work = !self.known_outcome.is_empty();
                let delivered = self.host.on_timer(ctx, work);
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
