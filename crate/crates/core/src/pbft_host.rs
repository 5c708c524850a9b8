//! Glue between a replica and its shard's PBFT engine: the pending request
//! queue, forwarding to the primary, the stall timer, and translating engine
//! output into network sends.

use crate::consensus::{EngineOut, Pbft, PbftMsg, Proposal, ProposalCheck};
use crate::ids::{NodeId, ReplicaId, Round, TxnId};
use crate::object_model::Transaction;
use crate::protocol::{Ctx, Event, Msg, Topology};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

pub const TIMER_PBFT: u64 = 1;

pub struct PbftHost {
    pub me: ReplicaId,
    pub topo: Arc<Topology>,
    pub engine: Pbft,
    pub known: BTreeMap<TxnId, Arc<Transaction>>,
    /// Admitted requests without an inputs round yet, oldest first.
    pending: VecDeque<TxnId>,
    pending_set: BTreeSet<TxnId>,
    timer_armed: bool,
}

impl PbftHost {
    pub fn new(me: ReplicaId, topo: &Arc<Topology>) -> Self {
        let cfg = topo.shard(me.shard).clone();
        PbftHost {
            me,
            topo: topo.clone(),
            engine: Pbft::new(cfg, me.idx, topo.window),
            known: BTreeMap::new(),
            pending: VecDeque::new(),
            pending_set: BTreeSet::new(),
            timer_armed: false,
        }
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Admits a request. Returns false if it was discarded or already known.
    pub fn learn(&mut self, ctx: &mut Ctx, t: &Arc<Transaction>) -> bool {
        if self.known.contains_key(&t.id) {
            return false;
        }
        if let Err(reason) = self.topo.admissible(t, self.me.shard) {
            ctx.event(Event::Discarded { time: ctx.now, replica: self.me, txn: t.id, reason });
            return false;
        }
        self.known.insert(t.id, t.clone());
        self.pending.push_back(t.id);
        self.pending_set.insert(t.id);
        if !self.engine.is_primary() {
            let p = self.engine.cfg.primary(self.engine.view);
            ctx.send(NodeId::Replica(ReplicaId { shard: self.me.shard, idx: p }), Msg::Request(t.clone()));
        }
        true
    }

    /// Called when an inputs round for `txn` is delivered.
    pub fn settle(&mut self, txn: TxnId) {
        if self.pending_set.remove(&txn) {
            self.pending.retain(|t| *t != txn);
        }
    }

    /// Feeds a message to the engine and returns delivered rounds.
    pub fn on_pbft(&mut self, ctx: &mut Ctx, from: NodeId, msg: &PbftMsg, check: &dyn ProposalCheck) -> Vec<(Round, Proposal)> {
        let NodeId::Replica(r) = from else { return vec![] };
        if r.shard != self.me.shard {
            return vec![];
        }
        let mut out = Vec::new();
        self.engine.on_message(r.idx, msg, check, &mut out);
        self.apply(ctx, out)
    }

    pub fn recheck(&mut self, ctx: &mut Ctx, check: &dyn ProposalCheck) -> Vec<(Round, Proposal)> {
        let mut out = Vec::new();
        self.engine.recheck(check, &mut out);
        self.apply(ctx, out)
    }

    /// Proposes `extra` first, then pending requests, while the window admits.
    pub fn propose(&mut self, ctx: &mut Ctx, extra: &[Proposal]) -> Vec<(Round, Proposal)> {
        let mut out = Vec::new();
        let candidates: Vec<Proposal> = extra
            .iter()
            .cloned()
            .chain(self.pending.iter().filter_map(|t| self.known.get(t)).map(|t| Proposal::Txn(t.clone())))
            .collect();
        for p in candidates {
            if !self.engine.can_propose() {
                break;
            }
            if p.key().map(|k| self.engine.has_key(k)).unwrap_or(false) {
                continue;
            }
            let view = self.engine.view;
            if let Some(round) = self.engine.propose(p.clone(), &mut out) {
                if let Some(txn) = p.txn_id() {
                    ctx.event(Event::Proposed { time: ctx.now, replica: self.me, txn, view, round });
                }
            }
        }
        self.apply(ctx, out)
    }

    fn apply(&mut self, ctx: &mut Ctx, out: Vec<EngineOut>) -> Vec<(Round, Proposal)> {
        let shard = self.me.shard;
        let mut delivered = Vec::new();
        for o in out {
            match o {
                EngineOut::Broadcast(m) => ctx.send_shard(shard, &Msg::Pbft { shard, msg: m }),
                EngineOut::SendTo(j, m) => ctx.send(NodeId::Replica(ReplicaId { shard, idx: j }), Msg::Pbft { shard, msg: m }),
                EngineOut::Deliver(r, p) => delivered.push((r, p)),
                EngineOut::ViewChangeStarted(_) => {}
                EngineOut::ViewInstalled(v) => {
                    ctx.event(Event::ViewChange { time: ctx.now, replica: self.me, view: v });
                    if !self.engine.is_primary() {
                        let p = ReplicaId { shard, idx: self.engine.cfg.primary(v) };
                        for t in &self.pending {
                            if let Some(txn) = self.known.get(t) {
                                ctx.send(NodeId::Replica(p), Msg::Request(txn.clone()));
                            }
                        }
                    }
                }
            }
        }
        delivered
    }

    /// Arms the stall timer if there is anything left to agree on.
    pub fn arm(&mut self, ctx: &mut Ctx, app_work: bool) {
        if self.timer_armed {
            return;
        }
        if app_work || self.has_pending() || self.engine.has_unfinished_rounds() {
            self.timer_armed = true;
            ctx.timer(self.topo.timing.view_timeout << self.engine.backoff, TIMER_PBFT);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, app_work: bool) -> Vec<(Round, Proposal)> {
        self.timer_armed = false;
        let mut out = Vec::new();
        self.engine.tick(app_work || self.has_pending(), &mut out);
        self.apply(ctx, out)
    }
}
