//! Optimistic protocol: the three PBFT phases of a round span every shard
//! the transaction touches, and a stalled round is recovered through the
//! global short-cut, the local short-cut, or a new view with optional
//! global state recovery.

use crate::consensus::ShardConfig;
use crate::ids::{Decision, NodeId, ReplicaId, Round, ShardId, Time, TxnId, View};
use crate::object_model::{local_inputs, Ledger, LedgerExt, ObjectId, Transaction};
use crate::protocol::{Ctx, Event, Msg, Node, SlotKind, Topology};
use crate::sim::MsgMeta;
use sha2::{Digest as _, Sha256};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

pub const TIMER_STALL: u64 = 3;

pub type Digest = [u8; 32];

/// Voters per shard for one certificate digest.
pub type Votes = BTreeMap<ShardId, BTreeSet<u32>>;

/// One shard's component `m(S, tau)` of view `view`, round `round`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcbPreprepare {
    pub shard: ShardId,
    pub view: View,
    pub round: Round,
    pub txn: Arc<Transaction>,
    pub inputs: BTreeSet<ObjectId>,
    pub available: BTreeSet<ObjectId>,
}

impl OcbPreprepare {
    pub fn is_full(&self) -> bool {
        self.inputs == self.available
    }

    /// Same slot, opposite fullness.
    pub fn flipped(&self) -> OcbPreprepare {
        let available = if self.is_full() && !self.inputs.is_empty() { BTreeSet::new() } else { self.inputs.clone() };
        OcbPreprepare { available, ..self.clone() }
    }
}

/// `M`: one preprepare per involved shard, all for the same transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalPreprepareCert {
    pub txn: Arc<Transaction>,
    pub parts: BTreeMap<ShardId, Arc<OcbPreprepare>>,
    pub digest: Digest,
}

impl GlobalPreprepareCert {
    pub fn new(parts: BTreeMap<ShardId, Arc<OcbPreprepare>>) -> Option<Self> {
        let txn = parts.values().next()?.txn.clone();
        if parts.iter().any(|(s, p)| p.shard != *s || p.txn.id != txn.id) {
            return None;
        }
        let mut h = Sha256::new();
        h.update(txn.id.0.to_le_bytes());
        for p in parts.values() {
            h.update(p.shard.0.to_le_bytes());
            h.update(p.view.to_le_bytes());
            h.update(p.round.to_le_bytes());
            for set in [&p.inputs, &p.available] {
                h.update((set.len() as u64).to_le_bytes());
                for o in set {
                    h.update(o.txn.0.to_le_bytes());
                    h.update(o.index.to_le_bytes());
                }
            }
        }
        Some(GlobalPreprepareCert { txn, parts, digest: h.finalize().into() })
    }

    /// The outcome `M` determines.
    pub fn decision(&self) -> Decision {
        if self.parts.values().all(|p| p.is_full()) {
            Decision::Commit
        } else {
            Decision::Abort
        }
    }

    pub fn slots(&self) -> Vec<(ShardId, View, Round)> {
        self.parts.values().map(|p| (p.shard, p.view, p.round)).collect()
    }

    fn slot_of(&self, s: ShardId) -> Option<(View, Round)> {
        self.parts.get(&s).map(|p| (p.view, p.round))
    }
}

/// What a replica knows about one M: prepare and commit certificates are
/// kept only for shards where they are complete.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evidence {
    pub m: Arc<GlobalPreprepareCert>,
    pub prepares: Votes,
    pub commits: Votes,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecoveryRq {
    pub view: View,
    pub round: Round,
    pub evidence: Option<Evidence>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewViewMsg {
    pub shard: ShardId,
    pub view: View,
    pub round: Round,
    pub primary: u32,
    pub requests: Vec<(u32, Arc<RecoveryRq>)>,
}

pub type RemoteState = Option<(Arc<GlobalPreprepareCert>, Votes)>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewViewGlobalMsg {
    pub shard: ShardId,
    pub view: View,
    pub round: Round,
    pub primary: u32,
    pub states: BTreeMap<ShardId, BTreeMap<u32, RemoteState>>,
}

#[derive(Clone, Debug)]
pub enum OcbMsg {
    GPrePrepare(Arc<OcbPreprepare>),
    GPrepare { shard: ShardId, txn: TxnId, digest: Digest },
    GCommit { shard: ShardId, txn: TxnId, digest: Digest },
    VCGlobalSCR(Arc<Evidence>),
    VCRecoveryRQ(Arc<RecoveryRq>),
    VCLocalSCR(Arc<Evidence>),
    NewView(Arc<NewViewMsg>),
    /// Asks for the state of `shard`'s round `round`, on behalf of its
    /// primary of `view`.
    VCGlobalStateRQ { shard: ShardId, view: View, round: Round },
    VCGlobalStateR { shard: ShardId, view: View, round: Round, state: RemoteState },
    NewViewGlobal(Arc<NewViewGlobalMsg>),
}

impl OcbMsg {
    pub fn tag(&self) -> &'static str {
        match self {
            OcbMsg::GPrePrepare(_) => "GPrePrepare",
            OcbMsg::GPrepare { .. } => "GPrepare",
            OcbMsg::GCommit { .. } => "GCommit",
            OcbMsg::VCGlobalSCR(_) => "VCGlobalSCR",
            OcbMsg::VCRecoveryRQ(_) => "VCRecoveryRQ",
            OcbMsg::VCLocalSCR(_) => "VCLocalSCR",
            OcbMsg::NewView(_) => "NewView",
            OcbMsg::VCGlobalStateRQ { .. } => "VCGlobalStateRQ",
            OcbMsg::VCGlobalStateR { .. } => "VCGlobalStateR",
            OcbMsg::NewViewGlobal(_) => "NewViewGlobal",
        }
    }

    pub fn meta(&self) -> MsgMeta {
        let base = MsgMeta { msg_type: self.tag(), ..Default::default() };
        match self {
            OcbMsg::GPrePrepare(p) => MsgMeta {
                round: Some(p.round),
                view: Some(p.view),
                shard: Some(p.shard),
                txn_id: Some(p.txn.id),
                ..base
            },
            OcbMsg::GPrepare { shard, txn, .. } | OcbMsg::GCommit { shard, txn, .. } => {
                MsgMeta { shard: Some(*shard), txn_id: Some(*txn), ..base }
            }
            OcbMsg::VCGlobalSCR(e) | OcbMsg::VCLocalSCR(e) => MsgMeta { txn_id: Some(e.m.txn.id), ..base },
            OcbMsg::VCRecoveryRQ(r) => MsgMeta { round: Some(r.round), view: Some(r.view), ..base },
            OcbMsg::NewView(nv) => {
                MsgMeta { round: Some(nv.round), view: Some(nv.view), shard: Some(nv.shard), ..base }
            }
            OcbMsg::VCGlobalStateRQ { shard, view, round } | OcbMsg::VCGlobalStateR { shard, view, round, .. } => {
                MsgMeta { round: Some(*round), view: Some(*view), shard: Some(*shard), ..base }
            }
            OcbMsg::NewViewGlobal(g) => {
                MsgMeta { round: Some(g.round), view: Some(g.view), shard: Some(g.shard), ..base }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Normal,
    AwaitNewView,
    AwaitGlobal,
}

struct Collect {
    view: View,
    shards: BTreeSet<ShardId>,
    got: BTreeMap<ShardId, BTreeMap<u32, RemoteState>>,
}

/// Recovery bookkeeping for the current round.
#[derive(Default)]
pub struct RecoveryState {
    requests: BTreeMap<View, BTreeMap<u32, Arc<RecoveryRq>>>,
    /// Views of this round this replica asked to leave; it sends no
    /// prepares in them.
    sent: BTreeSet<View>,
    new_view: Option<Arc<NewViewMsg>>,
    new_view_global: Option<Arc<NewViewGlobalMsg>>,
    early_global: Option<Arc<NewViewGlobalMsg>>,
    collecting: Option<Collect>,
}

impl RecoveryState {
    pub fn pending_requests(&self) -> usize {
        self.requests.values().map(|m| m.len()).sum()
    }
}

pub struct OcbReplica {
    me: ReplicaId,
    topo: Arc<Topology>,
    cfg: Arc<ShardConfig>,
    ledger: Ledger,
    view: View,
    round: Round,
    stage: Stage,
    known: BTreeMap<TxnId, Arc<Transaction>>,
    pending: VecDeque<TxnId>,
    attempts: BTreeMap<TxnId, u32>,
    dropped: BTreeSet<TxnId>,
    decided: BTreeMap<TxnId, Decision>,
    /// Own-shard component accepted in the current view and round.
    own: Option<Arc<OcbPreprepare>>,
    proposed: BTreeSet<(View, Round)>,
    /// Own-shard components seen this round, by view.
    tried: BTreeMap<View, TxnId>,
    remote: BTreeMap<(TxnId, ShardId), Arc<OcbPreprepare>>,
    future_pps: Vec<Arc<OcbPreprepare>>,
    future_scr: Vec<Arc<Evidence>>,
    future_nv: Option<Arc<NewViewMsg>>,
    ms: BTreeMap<Digest, Arc<GlobalPreprepareCert>>,
    /// Digest this replica prepared in each own-shard slot.
    prepared: BTreeMap<(View, Round), Digest>,
    prepares: BTreeMap<Digest, Votes>,
    commits: BTreeMap<Digest, Votes>,
    /// Ms this replica reached the global commit phase for, with the
    /// global prepare certificate.
    reached: BTreeMap<Digest, Votes>,
    history: BTreeMap<Round, Digest>,
    pub rec: RecoveryState,
    progress_at: Time,
    backoff: u32,
    timer_armed: bool,
}

impl OcbReplica {
    pub fn new(me: ReplicaId, topo: &Arc<Topology>) -> Self {
        OcbReplica {
            me,
            topo: topo.clone(),
            cfg: topo.shard(me.shard).clone(),
            ledger: topo.genesis.get(&me.shard).cloned().unwrap_or_default(),
            view: 0,
            round: 1,
            stage: Stage::Normal,
            known: BTreeMap::new(),
            pending: VecDeque::new(),
            attempts: BTreeMap::new(),
            dropped: BTreeSet::new(),
            decided: BTreeMap::new(),
            own: None,
            proposed: BTreeSet::new(),
            tried: BTreeMap::new(),
            remote: BTreeMap::new(),
            future_pps: Vec::new(),
            future_scr: Vec::new(),
            future_nv: None,
            ms: BTreeMap::new(),
            prepared: BTreeMap::new(),
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            reached: BTreeMap::new(),
            history: BTreeMap::new(),
            rec: RecoveryState::default(),
            progress_at: 0,
            backoff: 0,
            timer_armed: false,
        }
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn round(&self) -> Round {
        self.round
    }

    fn shard(&self) -> ShardId {
        self.me.shard
    }

    fn is_primary(&self) -> bool {
        self.cfg.primary(self.view) == self.me.idx
    }

    fn nf(&self, s: ShardId) -> usize {
        self.topo.shard(s).nf as usize
    }

    fn complete(&self, m: &GlobalPreprepareCert, v: &Votes) -> bool {
        m.parts.keys().all(|s| v.get(s).map(|x| x.len() >= self.nf(*s)).unwrap_or(false))
    }

    fn local_certs(&self, v: Option<&Votes>) -> Votes {
        v.map(|v| v.iter().filter(|(s, x)| x.len() >= self.nf(**s)).map(|(s, x)| (*s, x.clone())).collect())
            .unwrap_or_default()
    }

    /// Trusted certificates must name enough voters.
    fn certs_valid(&self, v: &Votes) -> bool {
        v.iter().all(|(s, x)| self.topo.shards.contains_key(s) && x.len() >= self.nf(*s))
    }

    fn in_round(&self, m: &GlobalPreprepareCert) -> bool {
        m.slot_of(self.shard()).map(|(_, r)| r == self.round).unwrap_or(false)
    }

    fn progress(&mut self, ctx: &Ctx) {
        self.progress_at = ctx.now;
    }

    fn send_involved(&self, ctx: &mut Ctx, t: &Transaction, m: OcbMsg) {
        let msg = Msg::Ocb(m);
        for s in self.topo.shards_of(t) {
            ctx.send_shard(s, &msg);
        }
    }

    fn inform(&self, ctx: &mut Ctx, t: &Transaction, d: Decision) {
        ctx.send(NodeId::Client(t.client), Msg::Inform { txn: t.id, shard: self.shard(), decision: d });
    }

    fn learn(&mut self, ctx: &mut Ctx, t: &Arc<Transaction>, forward: bool) -> bool {
        if self.known.contains_key(&t.id) {
            return true;
        }
        if let Err(reason) = self.topo.admissible(t, self.shard()) {
            ctx.event(Event::Discarded { time: ctx.now, replica: self.me, txn: t.id, reason });
            return false;
        }
        self.known.insert(t.id, t.clone());
        self.pending.push_back(t.id);
        if forward && !self.is_primary() {
            let p = ReplicaId { shard: self.shard(), idx: self.cfg.primary(self.view) };
            ctx.send(NodeId::Replica(p), Msg::Request(t.clone()));
        }
        true
    }

    fn maybe_propose(&mut self, ctx: &mut Ctx) {
        if !self.is_primary()
            || self.stage != Stage::Normal
            || self.own.is_some()
            || self.rec.sent.contains(&self.view)
            || self.proposed.contains(&(self.view, self.round))
            || self.reached.keys().any(|d| self.in_round(&self.ms[d]))
        {
            return;
        }
        let live: Vec<TxnId> = self.pending.iter().copied().filter(|t| !self.decided.contains_key(t)).collect();
        let pick = live
            .iter()
            .find(|t| self.remote.range((**t, ShardId(0))..=(**t, ShardId(u32::MAX))).next().is_some())
            .or(live.first())
            .copied();
        let Some(id) = pick else { return };
        let t = self.known[&id].clone();
        let Ok((inputs, available)) = local_inputs(&t, self.shard(), &self.topo.assign, &self.ledger) else { return };
        let pp = Arc::new(OcbPreprepare { shard: self.shard(), view: self.view, round: self.round, txn: t.clone(), inputs, available });
        self.proposed.insert((self.view, self.round));
        ctx.event(Event::Proposed { time: ctx.now, replica: self.me, txn: id, view: self.view, round: self.round });
        self.send_involved(ctx, &t, OcbMsg::GPrePrepare(pp.clone()));
        self.on_own_pp(ctx, pp);
    }

    fn on_own_pp(&mut self, ctx: &mut Ctx, pp: Arc<OcbPreprepare>) {
        if (pp.view, pp.round) > (self.view, self.round) || (pp.view == self.view && self.stage != Stage::Normal) {
            if pp.round >= self.round {
                self.future_pps.push(pp);
            }
            return;
        }
        if pp.view != self.view || pp.round != self.round || self.own.is_some() {
            return;
        }
        let t = &pp.txn;
        if self.decided.contains_key(&t.id) || self.topo.admissible(t, self.shard()).is_err() {
            return;
        }
        match local_inputs(t, self.shard(), &self.topo.assign, &self.ledger) {
            Ok((i, d)) if i == pp.inputs && d == pp.available => {}
            _ => return,
        }
        self.learn(ctx, t, false);
        self.own = Some(pp.clone());
        self.tried.insert(pp.view, t.id);
        self.progress(ctx);
        self.try_assemble(ctx);
    }

    fn on_remote_pp(&mut self, ctx: &mut Ctx, pp: Arc<OcbPreprepare>) {
        if !self.topo.shards_of(&pp.txn).contains(&self.shard()) {
            return;
        }
        let key = (pp.txn.id, pp.shard);
        let newer = self.remote.get(&key).map(|q| (pp.view, pp.round) > (q.view, q.round)).unwrap_or(true);
        if !newer {
            return;
        }
        self.remote.insert(key, pp.clone());
        if !self.decided.contains_key(&pp.txn.id) && !self.dropped.contains(&pp.txn.id) {
            self.learn(ctx, &pp.txn, true);
        }
        if self.own.as_ref().map(|o| o.txn.id == pp.txn.id).unwrap_or(false) {
            self.try_assemble(ctx);
        }
    }

    /// Finishes the global preprepare phase once every involved shard's
    /// component is known.
    fn try_assemble(&mut self, ctx: &mut Ctx) {
        let Some(own) = self.own.clone() else { return };
        if self.rec.sent.contains(&self.view) || self.prepared.contains_key(&(own.view, own.round)) {
            return;
        }
        let mut parts = BTreeMap::new();
        for s in self.topo.shards_of(&own.txn) {
            if s == self.shard() {
                parts.insert(s, own.clone());
            } else {
                match self.remote.get(&(own.txn.id, s)) {
                    Some(p) => parts.insert(s, p.clone()),
                    None => return,
                };
            }
        }
        let Some(m) = GlobalPreprepareCert::new(parts) else { return };
        let d = m.digest;
        self.ms.insert(d, Arc::new(m));
        self.prepared.insert((own.view, own.round), d);
        self.progress(ctx);
        self.send_involved(ctx, &own.txn, OcbMsg::GPrepare { shard: self.shard(), txn: own.txn.id, digest: d });
        self.prepares.entry(d).or_default().entry(self.me.shard).or_default().insert(self.me.idx);
        self.check_prepared(ctx, d);
    }

    fn check_prepared(&mut self, ctx: &mut Ctx, d: Digest) {
        if self.reached.contains_key(&d) {
            return;
        }
        let Some(m) = self.ms.get(&d).cloned() else { return };
        if !self.in_round(&m) {
            return;
        }
        let votes = self.prepares.get(&d).cloned().unwrap_or_default();
        if self.complete(&m, &votes) {
            let p = self.local_certs(Some(&votes));
            self.reach_commit_phase(ctx, d, p);
        }
    }

    fn reach_commit_phase(&mut self, ctx: &mut Ctx, d: Digest, p: Votes) {
        if self.reached.contains_key(&d) {
            self.check_committed(ctx, d);
            return;
        }
        let m = self.ms[&d].clone();
        self.reached.insert(d, p);
        self.progress(ctx);
        ctx.event(Event::GlobalCommitPhase { time: ctx.now, replica: self.me, txn: m.txn.id, digest: d, slots: m.slots() });
        self.send_involved(ctx, &m.txn, OcbMsg::GCommit { shard: self.shard(), txn: m.txn.id, digest: d });
        self.commits.entry(d).or_default().entry(self.me.shard).or_default().insert(self.me.idx);
        self.check_committed(ctx, d);
    }

    fn check_committed(&mut self, ctx: &mut Ctx, d: Digest) {
        if !self.reached.contains_key(&d) {
            return;
        }
        let m = self.ms[&d].clone();
        if !self.in_round(&m) {
            return;
        }
        let votes = self.commits.get(&d).cloned().unwrap_or_default();
        if self.complete(&m, &votes) {
            self.execute(ctx, d);
        }
    }

    fn execute(&mut self, ctx: &mut Ctx, d: Digest) {
        let m = self.ms[&d].clone();
        let t = m.txn.clone();
        let r = self.round;
        let decision = m.decision();
        ctx.event(Event::Accepted { time: ctx.now, replica: self.me, txn: t.id, round: r, kind: SlotKind::Inputs });
        ctx.event(Event::Decided { time: ctx.now, replica: self.me, txn: t.id, decision, round: r, outcome_round: None });
        if decision == Decision::Commit {
            let mut consumed = Vec::new();
            for o in &m.parts[&self.shard()].available {
                if self.ledger.destruct(*o).is_ok() {
                    consumed.push(*o);
                }
            }
            let mut constructed = Vec::new();
            for (o, owner) in &t.outputs {
                if self.topo.assign.placement(*o) == self.shard() && self.ledger.construct(*o, *owner, r).is_ok() {
                    constructed.push(*o);
                }
            }
            ctx.event(Event::Applied { time: ctx.now, replica: self.me, txn: t.id, consumed, constructed });
        }
        self.decided.insert(t.id, decision);
        self.pending.retain(|x| *x != t.id);
        self.history.insert(r, d);
        self.inform(ctx, &t, decision);

        self.round += 1;
        self.own = None;
        self.tried.clear();
        self.rec = RecoveryState::default();
        self.stage = Stage::Normal;
        self.backoff = 0;
        self.progress(ctx);
        self.replay_future(ctx);
    }

    fn replay_future(&mut self, ctx: &mut Ctx) {
        if let Some(nv) = self.future_nv.take() {
            self.on_new_view(ctx, nv);
        }
        for e in std::mem::take(&mut self.future_scr) {
            self.adopt(ctx, e);
        }
        let pps = std::mem::take(&mut self.future_pps);
        for pp in pps {
            self.on_own_pp(ctx, pp);
        }
    }

    /// Uses trusted certificates to reach the commit phase for `e.m`.
    fn adopt(&mut self, ctx: &mut Ctx, e: Arc<Evidence>) {
        let Some((_, r)) = e.m.slot_of(self.shard()) else { return };
        if r > self.round {
            self.future_scr.push(e);
            return;
        }
        if r < self.round || !self.complete(&e.m, &e.prepares) {
            return;
        }
        let d = e.m.digest;
        self.ms.entry(d).or_insert_with(|| e.m.clone());
        merge(self.prepares.entry(d).or_default(), &e.prepares);
        merge(self.commits.entry(d).or_default(), &e.commits);
        self.reach_commit_phase(ctx, d, e.prepares.clone());
    }

    fn evidence(&self, d: &Digest) -> Evidence {
        Evidence {
            m: self.ms[d].clone(),
            prepares: self.local_certs(self.prepares.get(d)),
            commits: self.local_certs(self.commits.get(d)),
        }
    }

    /// An M of this round this replica reached the commit phase for, with
    /// at least one local commit certificate.
    fn committed_evidence(&self) -> Option<Evidence> {
        self.reached
            .keys()
            .filter(|d| self.in_round(&self.ms[*d]))
            .map(|d| self.evidence(d))
            .find(|e| !e.commits.is_empty() && self.complete(&e.m, &e.prepares))
    }

    fn stall(&mut self, ctx: &mut Ctx) {
        if let Some(e) = self.committed_evidence() {
            let msg = Msg::Ocb(OcbMsg::VCGlobalSCR(Arc::new(e.clone())));
            for s in e.m.parts.keys() {
                if !e.commits.contains_key(s) {
                    ctx.send_shard(*s, &msg);
                }
            }
            return;
        }
        if let Some(c) = &self.rec.collecting {
            if c.view == self.view {
                let msg = Msg::Ocb(OcbMsg::VCGlobalStateRQ { shard: self.shard(), view: self.view, round: self.round });
                for s in &c.shards {
                    if c.got.get(s).map(|g| g.len() < self.nf(*s)).unwrap_or(true) {
                        ctx.send_shard(*s, &msg);
                    }
                }
                return;
            }
        }
        self.request_recovery(ctx, self.view);
    }

    fn request_recovery(&mut self, ctx: &mut Ctx, v: View) {
        let latest = self
            .ms
            .iter()
            .filter(|(_, m)| self.in_round(m))
            .filter(|(d, _)| self.prepared.values().any(|x| x == *d) || self.reached.contains_key(*d))
            .max_by_key(|(_, m)| m.slot_of(self.shard()))
            .map(|(d, _)| *d);
        let rq = Arc::new(RecoveryRq { view: v, round: self.round, evidence: latest.map(|d| self.evidence(&d)) });
        self.rec.sent.insert(v);
        ctx.send_shard(self.shard(), &Msg::Ocb(OcbMsg::VCRecoveryRQ(rq.clone())));
        self.rec.requests.entry(v).or_default().insert(self.me.idx, rq);
        self.check_requests(ctx);
    }

    fn on_rq(&mut self, ctx: &mut Ctx, from: ReplicaId, rq: Arc<RecoveryRq>) {
        let to = NodeId::Replica(from);
        if rq.round < self.round {
            for (_, d) in self.history.range(rq.round..) {
                let e = Evidence { m: self.ms[d].clone(), prepares: self.reached[d].clone(), commits: self.local_certs(self.commits.get(d)) };
                ctx.send(to, Msg::Ocb(OcbMsg::VCLocalSCR(Arc::new(e))));
            }
            return;
        }
        if rq.round > self.round {
            // We are behind; ask the sender for what we missed.
            let mine = Arc::new(RecoveryRq { view: self.view, round: self.round, evidence: None });
            ctx.send(to, Msg::Ocb(OcbMsg::VCRecoveryRQ(mine)));
            return;
        }
        if let Some(e) = self.committed_evidence() {
            ctx.send(to, Msg::Ocb(OcbMsg::VCLocalSCR(Arc::new(e))));
        }
        if rq.view < self.view {
            if let Some(nv) = &self.rec.new_view {
                ctx.send(to, Msg::Ocb(OcbMsg::NewView(nv.clone())));
                if let Some(g) = &self.rec.new_view_global {
                    ctx.send(to, Msg::Ocb(OcbMsg::NewViewGlobal(g.clone())));
                }
            }
        }
        self.rec.requests.entry(rq.view).or_default().insert(from.idx, rq);
        self.check_requests(ctx);
    }

    fn check_requests(&mut self, ctx: &mut Ctx) {
        let f = self.cfg.f as usize;
        let nf = self.cfg.nf as usize;
        let mut latest: BTreeMap<u32, View> = BTreeMap::new();
        for (v, m) in self.rec.requests.range(self.view..) {
            for q in m.keys() {
                latest.insert(*q, *v);
            }
        }
        if latest.len() > f {
            let w = *latest.values().min().unwrap();
            if !self.rec.sent.range(w..).any(|_| true) {
                if w > self.view {
                    self.view = w;
                    self.stage = Stage::AwaitNewView;
                    self.own = None;
                }
                self.request_recovery(ctx, w);
                return;
            }
        }
        let full = self.rec.requests.range(self.view..).rev().find(|(_, m)| m.len() >= nf).map(|(v, m)| (*v, m.clone()));
        if let Some((v, m)) = full {
            self.enter_view(ctx, v + 1, m);
        }
    }

    fn enter_view(&mut self, ctx: &mut Ctx, v: View, rqs: BTreeMap<u32, Arc<RecoveryRq>>) {
        if v <= self.view && self.stage == Stage::AwaitNewView {
            return;
        }
        if v < self.view {
            return;
        }
        self.view = v;
        self.stage = Stage::AwaitNewView;
        self.own = None;
        self.progress(ctx);
        if self.cfg.primary(v) == self.me.idx {
            let nf = self.cfg.nf as usize;
            let nv = Arc::new(NewViewMsg {
                shard: self.shard(),
                view: v,
                round: self.round,
                primary: self.me.idx,
                requests: rqs.into_iter().take(nf).collect(),
            });
            ctx.send_shard(self.shard(), &Msg::Ocb(OcbMsg::NewView(nv.clone())));
            self.on_new_view(ctx, nv);
        }
    }

    fn new_view_valid(&self, nv: &NewViewMsg) -> bool {
        let senders: BTreeSet<u32> = nv.requests.iter().map(|(q, _)| *q).collect();
        nv.shard == self.shard()
            && nv.view > 0
            && nv.primary == self.cfg.primary(nv.view)
            && senders.len() == nv.requests.len()
            && senders.len() >= self.cfg.nf as usize
            && nv.requests.iter().all(|(_, r)| r.view + 1 == nv.view && r.round == nv.round)
    }

    fn on_new_view(&mut self, ctx: &mut Ctx, nv: Arc<NewViewMsg>) {
        if !self.new_view_valid(&nv) {
            return;
        }
        if nv.round < self.round {
            if nv.view > self.view {
                self.view = nv.view;
                self.stage = Stage::Normal;
            }
            return;
        }
        if nv.round > self.round {
            if self.future_nv.as_ref().map(|x| x.view < nv.view).unwrap_or(true) {
                self.future_nv = Some(nv);
            }
            return;
        }
        if nv.view < self.view || (nv.view == self.view && self.stage != Stage::AwaitNewView) {
            return;
        }
        self.view = nv.view;
        self.stage = Stage::Normal;
        self.own = None;
        self.rec.new_view = Some(nv.clone());
        self.rec.new_view_global = None;
        self.rec.requests = self.rec.requests.split_off(&self.view);
        self.progress(ctx);
        ctx.event(Event::ViewChange { time: ctx.now, replica: self.me, view: self.view });

        let evidence: Vec<&Evidence> =
            nv.requests.iter().filter_map(|(_, r)| r.evidence.as_ref()).filter(|e| self.in_round(&e.m)).collect();
        let recover = evidence
            .iter()
            .filter(|e| !e.commits.is_empty() && self.complete(&e.m, &e.prepares) && self.certs_valid(&e.commits))
            .max_by_key(|e| e.m.slot_of(self.shard()))
            .map(|e| Arc::new((*e).clone()));
        if let Some(e) = recover {
            self.adopt(ctx, e);
            return;
        }
        if evidence.is_empty() {
            self.fail_round(ctx);
            return;
        }
        self.stage = Stage::AwaitGlobal;
        if self.is_primary() {
            let shards: BTreeSet<ShardId> = evidence.iter().flat_map(|e| self.topo.shards_of(&e.m.txn)).collect();
            let mut c = Collect { view: self.view, shards: shards.clone(), got: BTreeMap::new() };
            c.got.entry(self.shard()).or_default().insert(self.me.idx, self.state_of(self.shard(), self.round));
            self.rec.collecting = Some(c);
            let msg = Msg::Ocb(OcbMsg::VCGlobalStateRQ { shard: self.shard(), view: self.view, round: self.round });
            for s in &shards {
                ctx.send_shard(*s, &msg);
            }
            self.try_finish_collect(ctx);
        }
        if let Some(g) = self.rec.early_global.take() {
            self.on_new_view_global(ctx, g);
        }
    }

    /// A round that recovered nothing: count the attempt of every
    /// transaction proposed in it, dropping those out of attempts.
    fn fail_round(&mut self, ctx: &mut Ctx) {
        let failed: Vec<TxnId> = self.tried.range(..self.view).map(|(_, t)| *t).collect();
        self.tried = self.tried.split_off(&self.view);
        for t in failed {
            let a = self.attempts.entry(t).or_insert(0);
            *a += 1;
            if *a >= self.topo.ocb_max_attempts && !self.decided.contains_key(&t) && self.dropped.insert(t) {
                self.pending.retain(|x| *x != t);
                ctx.event(Event::Dropped { time: ctx.now, replica: self.me, txn: t });
            }
        }
    }

    /// The latest M (by `shard`'s view) with a `shard`-component of round
    /// `round` this replica reached the commit phase for.
    fn state_of(&self, shard: ShardId, round: Round) -> RemoteState {
        self.reached
            .iter()
            .filter(|(d, _)| self.ms[*d].slot_of(shard).map(|(_, r)| r == round).unwrap_or(false))
            .max_by_key(|(d, _)| self.ms[*d].slot_of(shard))
            .map(|(d, p)| (self.ms[d].clone(), p.clone()))
    }

    fn on_gs_response(&mut self, ctx: &mut Ctx, from: ReplicaId, view: View, round: Round, state: RemoteState) {
        if round != self.round {
            return;
        }
        let Some(c) = &mut self.rec.collecting else { return };
        if c.view != view || !c.shards.contains(&from.shard) {
            return;
        }
        c.got.entry(from.shard).or_default().insert(from.idx, state);
        self.try_finish_collect(ctx);
    }

    fn try_finish_collect(&mut self, ctx: &mut Ctx) {
        let Some(c) = &self.rec.collecting else { return };
        if !c.shards.iter().all(|s| c.got.get(s).map(|g| g.len() >= self.nf(*s)).unwrap_or(false)) {
            return;
        }
        let nf_of = |s: &ShardId| self.nf(*s);
        let states = c
            .got
            .iter()
            .map(|(s, g)| (*s, g.iter().take(nf_of(s)).map(|(k, v)| (*k, v.clone())).collect()))
            .collect();
        let g = Arc::new(NewViewGlobalMsg { shard: self.shard(), view: c.view, round: self.round, primary: self.me.idx, states });
        self.rec.collecting = None;
        ctx.send_shard(self.shard(), &Msg::Ocb(OcbMsg::NewViewGlobal(g.clone())));
        self.on_new_view_global(ctx, g);
    }

    fn on_new_view_global(&mut self, ctx: &mut Ctx, g: Arc<NewViewGlobalMsg>) {
        let valid = g.shard == self.shard()
            && g.primary == self.cfg.primary(g.view)
            && g.states.iter().all(|(s, m)| self.topo.shards.contains_key(s) && m.len() >= self.nf(*s));
        if !valid || g.round != self.round {
            return;
        }
        if g.view != self.view || self.stage != Stage::AwaitGlobal {
            if g.view >= self.view {
                self.rec.early_global = Some(g);
            }
            return;
        }
        self.rec.new_view_global = Some(g.clone());
        self.stage = Stage::Normal;
        self.progress(ctx);
        let best = g
            .states
            .values()
            .flat_map(|m| m.values())
            .flatten()
            .filter(|(m, p)| self.in_round(m) && self.complete(m, p))
            .max_by_key(|(m, _)| m.slot_of(self.shard()));
        match best {
            Some((m, p)) => {
                let e = Arc::new(Evidence { m: m.clone(), prepares: p.clone(), commits: Votes::new() });
                self.adopt(ctx, e);
            }
            None => self.fail_round(ctx),
        }
    }

    fn on_global_scr(&mut self, ctx: &mut Ctx, from: ReplicaId, e: Arc<Evidence>) {
        if e.commits.is_empty() || !self.certs_valid(&e.commits) || !self.complete(&e.m, &e.prepares) {
            return;
        }
        let d = e.m.digest;
        if self.reached.contains_key(&d) {
            merge(self.commits.entry(d).or_default(), &e.commits);
            let msg = OcbMsg::GCommit { shard: self.shard(), txn: e.m.txn.id, digest: d };
            ctx.send(NodeId::Replica(from), Msg::Ocb(msg));
            self.check_committed(ctx, d);
            return;
        }
        self.adopt(ctx, e);
    }

    fn on_vote(&mut self, ctx: &mut Ctx, from: ReplicaId, shard: ShardId, d: Digest, commit: bool) {
        if from.shard != shard {
            return;
        }
        let map = if commit { &mut self.commits } else { &mut self.prepares };
        map.entry(d).or_default().entry(shard).or_default().insert(from.idx);
        if commit {
            self.check_committed(ctx, d);
        } else {
            self.check_prepared(ctx, d);
        }
    }

    fn has_work(&self) -> bool {
        self.own.is_some()
            || self.stage != Stage::Normal
            || self.rec.collecting.is_some()
            || self.pending.iter().any(|t| !self.decided.contains_key(t))
    }

    fn settle(&mut self, ctx: &mut Ctx) {
        self.maybe_propose(ctx);
        if !self.timer_armed && self.has_work() {
            // Work after an idle period: the stall clock starts now.
            self.progress_at = ctx.now;
            self.arm(ctx);
        }
    }

    fn arm(&mut self, ctx: &mut Ctx) {
        self.timer_armed = true;
        let deadline = self.progress_at + (self.topo.timing.view_timeout << self.backoff);
        ctx.timer(deadline.saturating_sub(ctx.now).max(1), TIMER_STALL);
    }
}

fn merge(into: &mut Votes, from: &Votes) {
    for (s, v) in from {
        into.entry(*s).or_default().extend(v.iter().copied());
    }
}

impl Node for OcbReplica {
    fn on_message(&mut self, ctx: &mut Ctx, from: NodeId, msg: Msg) {
        match msg {
            Msg::Request(t) => {
                if let Some(d) = self.decided.get(&t.id) {
                    self.inform(ctx, &t, *d);
                } else if !self.dropped.contains(&t.id) {
                    if self.known.contains_key(&t.id) {
                        if !self.is_primary() && matches!(from, NodeId::Client(_)) {
                            let p = ReplicaId { shard: self.shard(), idx: self.cfg.primary(self.view) };
                            ctx.send(NodeId::Replica(p), Msg::Request(t.clone()));
                        }
                    } else {
                        self.learn(ctx, &t, true);
                    }
                }
            }
            Msg::Ocb(m) => {
                let NodeId::Replica(r) = from else { return };
                let mine = r.shard == self.shard();
                match m {
                    OcbMsg::GPrePrepare(pp) => {
                        if r.shard != pp.shard || r.idx != self.topo.shard(pp.shard).primary(pp.view) {
                            return;
                        }
                        if mine {
                            self.on_own_pp(ctx, pp);
                        } else {
                            self.on_remote_pp(ctx, pp);
                        }
                    }
                    OcbMsg::GPrepare { shard, digest, .. } => self.on_vote(ctx, r, shard, digest, false),
                    OcbMsg::GCommit { shard, digest, .. } => self.on_vote(ctx, r, shard, digest, true),
                    OcbMsg::VCGlobalSCR(e) => self.on_global_scr(ctx, r, e),
                    OcbMsg::VCRecoveryRQ(rq) if mine => self.on_rq(ctx, r, rq),
                    OcbMsg::VCLocalSCR(e) if mine => {
                        if self.certs_valid(&e.commits) && !e.commits.is_empty() {
                            self.adopt(ctx, e);
                        }
                    }
                    OcbMsg::NewView(nv) if mine => self.on_new_view(ctx, nv),
                    OcbMsg::VCGlobalStateRQ { shard, view, round } => {
                        let state = self.state_of(shard, round);
                        ctx.send(from, Msg::Ocb(OcbMsg::VCGlobalStateR { shard, view, round, state }));
                    }
                    OcbMsg::VCGlobalStateR { shard, view, round, state } if shard == self.shard() => {
                        self.on_gs_response(ctx, r, view, round, state)
                    }
                    OcbMsg::NewViewGlobal(g) if mine => self.on_new_view_global(ctx, g),
                    _ => {}
                }
            }
            _ => {}
        }
        self.settle(ctx);
    }

    fn on_timer(&mut self, ctx: &mut Ctx, id: u64) {
        if id != TIMER_STALL {
            return;
        }
        self.timer_armed = false;
        if self.has_work() && ctx.now >= self.progress_at + (self.topo.timing.view_timeout << self.backoff) {
            self.stall(ctx);
            self.progress_at = ctx.now;
            self.backoff = (self.backoff + 1).min(4);
        }
        self.maybe_propose(ctx);
        if self.has_work() {
            self.arm(ctx);
        }
    }

    fn ledger(&self) -> Option<&Ledger> {
        Some(&self.ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ClientId;

    fn pp(shard: u32, view: View, txn: &Arc<Transaction>, full: bool) -> Arc<OcbPreprepare> {
        let o = ObjectId::genesis(shard);
        let inputs: BTreeSet<_> = [o].into();
        let available = if full { inputs.clone() } else { BTreeSet::new() };
        Arc::new(OcbPreprepare { shard: ShardId(shard), view, round: 1, txn: txn.clone(), inputs, available })
    }

    #[test]
    fn digest_depends_on_every_component() {
        let t = Arc::new(Transaction::new(TxnId(1), ClientId(0), [ObjectId::genesis(0)], &[], BTreeMap::new()).unwrap());
        let m = |v: View, full: bool| {
            GlobalPreprepareCert::new([(ShardId(0), pp(0, 0, &t, true)), (ShardId(1), pp(1, v, &t, full))].into()).unwrap()
        };
        assert_eq!(m(0, true).digest, m(0, true).digest);
        assert_ne!(m(0, true).digest, m(1, true).digest);
        assert_ne!(m(0, true).digest, m(0, false).digest);
        assert_eq!(m(0, true).decision(), Decision::Commit);
        assert_eq!(m(0, false).decision(), Decision::Abort);
    }

    #[test]
    fn flipped_component_changes_fullness() {
        let t = Arc::new(Transaction::new(TxnId(1), ClientId(0), [ObjectId::genesis(0)], &[], BTreeMap::new()).unwrap());
        let p = pp(0, 0, &t, true);
        assert!(!p.flipped().is_full());
        assert!(p.flipped().flipped().is_full());
    }
}
