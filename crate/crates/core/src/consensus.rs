//! Per-shard PBFT-style consensus, cluster-sending, and the proposal window.
//!
//! The engine is a state machine driven by the replica that owns it: every
//! call takes the incoming message (or tick) and appends the resulting
//! actions to an output vector. It never touches the network itself.

use crate::ids::{ReplicaId, Round, ShardId, TxnId, View};
use crate::object_model::Transaction;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardConfig {
    pub shard_id: ShardId,
    pub replicas: Vec<ReplicaId>,
    pub n: u32,
    pub f: u32,
    pub nf: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("shard {shard}: n = {n} must exceed 3f = {}", 3 * f)]
    TooFewReplicas { shard: ShardId, n: u32, f: u32 },
}

impl ShardConfig {
    pub fn new(shard: ShardId, n: u32, f: u32) -> Result<Self, ConfigError> {
        if n <= 3 * f {
            return Err(ConfigError::TooFewReplicas { shard, n, f });
        }
        Ok(ShardConfig {
            shard_id: shard,
            replicas: (0..n).map(|i| ReplicaId { shard, idx: i }).collect(),
            n,
            f,
            nf: n - f,
        })
    }

    /// Primary of view `v` is replica `v mod n`.
    pub fn primary(&self, v: View) -> u32 {
        (v % self.n as u64) as u32
    }

    /// Matching replies a client needs from this shard.
    pub fn client_quorum(&self) -> u32 {
        self.nf - self.f
    }
}

/// What a shard agrees on in one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Proposal {
    /// Filler for rounds that a new view could not recover.
    Null,
    /// Local-inputs step for a transaction.
    Txn(Arc<Transaction>),
    /// Second step of the pessimistic protocol: the outcome of `txn`.
    Outcome { txn: TxnId, commit: bool },
}

impl Proposal {
    pub fn digest(&self) -> u64 {
        match self {
            Proposal::Null => 0x6e75_6c6c,
            Proposal::Txn(t) => t.id.0.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1,
            Proposal::Outcome { txn, commit } => {
                txn.0.wrapping_mul(0xc2b2_ae3d_27d4_eb4f) ^ (2 + *commit as u64)
            }
        }
    }

    /// Proposals with equal keys may appear in at most one round.
    pub fn key(&self) -> Option<(u8, TxnId)> {
        match self {
            Proposal::Null => None,
            Proposal::Txn(t) => Some((0, t.id)),
            Proposal::Outcome { txn, .. } => Some((1, *txn)),
        }
    }

    pub fn txn_id(&self) -> Option<TxnId> {
        self.key().map(|k| k.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Idle,
    Preprepared,
    Prepared,
    Committed,
    Executed,
}

#[derive(Clone, Debug)]
pub struct RoundSlot {
    pub round: Round,
    pub view: View,
    pub proposal: Option<Proposal>,
    pub phase: Phase,
    /// Votes by `(view, digest)`.
    pub prepare_votes: BTreeMap<(View, u64), BTreeSet<u32>>,
    pub commit_votes: BTreeMap<(View, u64), BTreeSet<u32>>,
    /// Preprepare held back until the application can judge it.
    deferred: bool,
    /// Views in which this replica already sent a prepare.
    prepared_in: BTreeSet<View>,
}

impl RoundSlot {
    fn new(round: Round, view: View) -> Self {
        RoundSlot {
            round,
            view,
            proposal: None,
            phase: Phase::Idle,
            prepare_votes: BTreeMap::new(),
            commit_votes: BTreeMap::new(),
            deferred: false,
            prepared_in: BTreeSet::new(),
        }
    }
}

/// Proof that a round was prepared (`committed = false`) or committed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CertEntry {
    pub round: Round,
    pub view: View,
    pub proposal: Proposal,
    pub voters: BTreeSet<u32>,
    pub committed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewChange {
    pub view: View,
    pub from: u32,
    /// Sender's low-water mark: it delivered every round below `low + W`
    /// and reports certificates from `low` up.
    pub low: Round,
    pub entries: Vec<CertEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NewViewEntry {
    Decided(CertEntry),
    Repropose(Round, Proposal),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewView {
    pub view: View,
    pub view_changes: Vec<Arc<ViewChange>>,
    pub entries: Vec<NewViewEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PbftMsg {
    PrePrepare { view: View, round: Round, proposal: Proposal },
    Prepare { view: View, round: Round, digest: u64 },
    Commit { view: View, round: Round, digest: u64 },
    ViewChange(Arc<ViewChange>),
    NewView(Arc<NewView>),
    /// Catch-up request for rounds from `from` on.
    Fetch { from: Round },
    /// Committed rounds with their commit certificates.
    Certs(Arc<Vec<CertEntry>>),
}

impl PbftMsg {
    pub fn tag(&self) -> &'static str {
        match self {
            PbftMsg::PrePrepare { .. } => "PrePrepare",
            PbftMsg::Prepare { .. } => "Prepare",
            PbftMsg::Commit { .. } => "Commit",
            PbftMsg::ViewChange(_) => "ViewChange",
            PbftMsg::NewView(_) => "NewView",
            PbftMsg::Fetch { .. } => "Fetch",
            PbftMsg::Certs(_) => "Certs",
        }
    }

    pub fn view(&self) -> Option<View> {
        match self {
            PbftMsg::PrePrepare { view, .. } | PbftMsg::Prepare { view, .. } | PbftMsg::Commit { view, .. } => Some(*view),
            PbftMsg::ViewChange(vc) => Some(vc.view),
            PbftMsg::NewView(nv) => Some(nv.view),
            _ => None,
        }
    }

    pub fn round(&self) -> Option<Round> {
        match self {
            PbftMsg::PrePrepare { round, .. } | PbftMsg::Prepare { round, .. } | PbftMsg::Commit { round, .. } => Some(*round),
            _ => None,
        }
    }
}

/// Application verdict on a proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
    /// Not enough local information yet; ask again later.
    Defer,
}

pub trait ProposalCheck {
    fn check(&self, round: Round, p: &Proposal) -> Verdict;
}

impl<F: Fn(Round, &Proposal) -> Verdict> ProposalCheck for F {
    fn check(&self, round: Round, p: &Proposal) -> Verdict {
        self(round, p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EngineOut {
    /// To every other replica of the shard.
    Broadcast(PbftMsg),
    SendTo(u32, PbftMsg),
    /// Rounds are handed to the application strictly in order.
    Deliver(Round, Proposal),
    /// This replica started changing to `view`.
    ViewChangeStarted(View),
    /// This replica installed `view`.
    ViewInstalled(View),
}

/// Width of the out-of-order window: at most `width` undelivered rounds may
/// be in flight. Transactions touching a common object are proposed in round
/// order, which holds because a primary proposes rounds in increasing order
/// and a transaction is never proposed twice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProposalWindow {
    pub width: u64,
}

impl Default for ProposalWindow {
    fn default() -> Self {
        ProposalWindow { width: 16 }
    }
}

impl ProposalWindow {
    pub fn admits(&self, next_round: Round, next_undelivered: Round) -> bool {
        next_round < next_undelivered + self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Normal,
    Changing(View),
}

/// One replica's PBFT state for its shard.
#[derive(Clone, Debug)]
pub struct Pbft {
    pub cfg: Arc<ShardConfig>,
    pub me: u32,
    pub view: View,
    status: Status,
    pub window: ProposalWindow,
    slots: BTreeMap<Round, RoundSlot>,
    /// Committed rounds.
    log: BTreeMap<Round, CertEntry>,
    /// Highest-view prepared certificate per undelivered round. Survives
    /// view changes so later view-change messages still report it.
    prepared: BTreeMap<Round, CertEntry>,
    /// Keys of delivered proposals; a later round with the same key is
    /// delivered as Null.
    delivered_keys: BTreeSet<(u8, TxnId)>,
    /// Next round to hand to the application.
    next_deliver: Round,
    next_propose: Round,
    view_changes: BTreeMap<View, BTreeMap<u32, Arc<ViewChange>>>,
    sent_new_view: BTreeSet<View>,
    keys_in_log: BTreeSet<(u8, TxnId)>,
    /// Bumped on any forward movement; compared across ticks.
    progress: u64,
    last_tick_progress: u64,
    idle_ticks: u32,
    /// Consecutive view changes without progress; scales timeouts.
    pub backoff: u32,
}

impl Pbft {
    pub fn new(cfg: Arc<ShardConfig>, me: u32, window: ProposalWindow) -> Self {
        Pbft {
            cfg,
            me,
            view: 0,
            status: Status::Normal,
            window,
            slots: BTreeMap::new(),
            log: BTreeMap::new(),
            prepared: BTreeMap::new(),
            delivered_keys: BTreeSet::new(),
            next_deliver: 1,
            next_propose: 1,
            view_changes: BTreeMap::new(),
            sent_new_view: BTreeSet::new(),
            keys_in_log: BTreeSet::new(),
            progress: 0,
            last_tick_progress: 0,
            idle_ticks: 0,
            backoff: 0,
        }
    }

    pub fn is_primary(&self) -> bool {
        self.status == Status::Normal && self.cfg.primary(self.view) == self.me
    }

    pub fn in_view_change(&self) -> bool {
        matches!(self.status, Status::Changing(_))
    }

    pub fn next_undelivered(&self) -> Round {
        self.next_deliver
    }

    pub fn can_propose(&self) -> bool {
        self.is_primary() && self.window.admits(self.next_propose, self.next_deliver)
    }

    /// True if some round holds (or committed) a proposal with this key.
    pub fn has_key(&self, key: (u8, TxnId)) -> bool {
        self.keys_in_log.contains(&key) || self.live_key_round(key).is_some()
    }

    fn live_key_round(&self, key: (u8, TxnId)) -> Option<Round> {
        self.slots
            .values()
            .find(|s| s.view == self.view && s.phase >= Phase::Preprepared && s.proposal.as_ref().and_then(|p| p.key()) == Some(key))
            .map(|s| s.round)
    }

    /// Rounds that are preprepared but not yet committed, or that peers are
    /// voting on while this replica missed the preprepare.
    pub fn has_unfinished_rounds(&self) -> bool {
        let f1 = self.cfg.f as usize + 1;
        let heard = |votes: &BTreeMap<(View, u64), BTreeSet<u32>>| votes.values().any(|v| v.len() >= f1);
        self.slots.values().any(|s| {
            s.phase < Phase::Committed
                && (s.phase >= Phase::Preprepared || heard(&s.prepare_votes) || heard(&s.commit_votes))
        })
            || self.log.keys().next_back().map(|r| *r >= self.next_deliver).unwrap_or(false)
    }

    pub fn committed(&self, r: Round) -> Option<&Proposal> {
        self.log.get(&r).map(|e| &e.proposal)
    }

    fn slot(&mut self, r: Round) -> &mut RoundSlot {
        let v = self.view;
        self.slots.entry(r).or_insert_with(|| RoundSlot::new(r, v))
    }

    /// Primary only: propose `p` in the next round.
    pub fn propose(&mut self, p: Proposal, out: &mut Vec<EngineOut>) -> Option<Round> {
        if !self.can_propose() {
            return None;
        }
        if let Some(k) = p.key() {
            if self.has_key(k) {
                return None;
            }
        }
        let r = self.next_propose;
        self.next_propose += 1;
        let v = self.view;
        let me = self.me;
        let d = p.digest();
        let s = self.slot(r);
        *s = RoundSlot::new(r, v);
        s.proposal = Some(p.clone());
        s.phase = Phase::Preprepared;
        s.prepared_in.insert(v);
        s.prepare_votes.entry((v, d)).or_default().insert(me);
        out.push(EngineOut::Broadcast(PbftMsg::PrePrepare { view: v, round: r, proposal: p }));
        self.progress += 1;
        self.advance(r, out);
        Some(r)
    }

    pub fn on_message(&mut self, from: u32, msg: &PbftMsg, app: &dyn ProposalCheck, out: &mut Vec<EngineOut>) {
        if from >= self.cfg.n || from == self.me {
            return;
        }
        match msg {
            PbftMsg::PrePrepare { view, round, proposal } => self.on_preprepare(from, *view, *round, proposal, app, out),
            PbftMsg::Prepare { view, round, digest } => {
                if *round < self.next_deliver && self.log.contains_key(round) {
                    return;
                }
                self.slot(*round).prepare_votes.entry((*view, *digest)).or_default().insert(from);
                self.advance(*round, out);
            }
            PbftMsg::Commit { view, round, digest } => {
                if self.log.contains_key(round) {
                    return;
                }
                self.slot(*round).commit_votes.entry((*view, *digest)).or_default().insert(from);
                self.advance(*round, out);
            }
            PbftMsg::ViewChange(vc) => self.on_view_change(from, vc.clone(), out),
            PbftMsg::NewView(nv) => self.on_new_view(from, nv, out),
            PbftMsg::Fetch { from: start } => {
                let certs: Vec<CertEntry> = self.log.range(*start..).map(|(_, e)| e.clone()).collect();
                if !certs.is_empty() {
                    out.push(EngineOut::SendTo(from, PbftMsg::Certs(Arc::new(certs))));
                }
            }
            PbftMsg::Certs(certs) => {
                for c in certs.iter() {
                    if c.committed && c.voters.len() >= self.cfg.nf as usize {
                        self.decide(c.clone(), out);
                    }
                }
            }
        }
    }

    fn on_preprepare(&mut self, from: u32, view: View, round: Round, p: &Proposal, app: &dyn ProposalCheck, out: &mut Vec<EngineOut>) {
        if self.status != Status::Normal || view != self.view || from != self.cfg.primary(view) {
            return;
        }
        if self.log.contains_key(&round) {
            return;
        }
        if let Some(existing) = self.slots.get(&round) {
            if existing.view == view && existing.proposal.is_some() {
                return; // first preprepare per (view, round) wins
            }
        }
        if let Some(k) = p.key() {
            if self.keys_in_log.contains(&k) {
                return;
            }
            if let Some(r2) = self.live_key_round(k) {
                if r2 != round {
                    return;
                }
            }
        }
        let s = self.slot(round);
        if s.view != view {
            let votes = (std::mem::take(&mut s.prepare_votes), std::mem::take(&mut s.commit_votes));
            *s = RoundSlot::new(round, view);
            s.prepare_votes = votes.0;
            s.commit_votes = votes.1;
        }
        s.proposal = Some(p.clone());
        s.prepare_votes.entry((view, p.digest())).or_default().insert(from);
        self.judge(round, app, out);
    }

    /// Runs the application check on a held preprepare and votes if it passes.
    fn judge(&mut self, round: Round, app: &dyn ProposalCheck, out: &mut Vec<EngineOut>) {
        let me = self.me;
        let Some(s) = self.slots.get_mut(&round) else { return };
        let Some(p) = s.proposal.clone() else { return };
        if s.phase >= Phase::Preprepared || s.prepared_in.contains(&s.view) {
            return;
        }
        match app.check(round, &p) {
            Verdict::Reject => {
                s.deferred = false;
                return;
            }
            Verdict::Defer => {
                s.deferred = true;
                return;
            }
            Verdict::Accept => {}
        }
        s.deferred = false;
        s.phase = Phase::Preprepared;
        let v = s.view;
        let d = p.digest();
        s.prepared_in.insert(v);
        s.prepare_votes.entry((v, d)).or_default().insert(me);
        out.push(EngineOut::Broadcast(PbftMsg::Prepare { view: v, round, digest: d }));
        self.progress += 1;
        self.advance(round, out);
    }

    /// Re-evaluates deferred preprepares after the application learned more.
    pub fn recheck(&mut self, app: &dyn ProposalCheck, out: &mut Vec<EngineOut>) {
        let deferred: Vec<Round> = self.slots.values().filter(|s| s.deferred).map(|s| s.round).collect();
        for r in deferred {
            self.judge(r, app, out);
        }
    }

    fn advance(&mut self, round: Round, out: &mut Vec<EngineOut>) {
        let nf = self.cfg.nf as usize;
        let me = self.me;
        let Some(s) = self.slots.get_mut(&round) else { return };
        let Some(p) = s.proposal.clone() else { return };
        let key = (s.view, p.digest());
        let current = self.status == Status::Normal && s.view == self.view;
        if current && s.phase == Phase::Preprepared && s.prepare_votes.get(&key).map(|v| v.len()).unwrap_or(0) >= nf {
            s.phase = Phase::Prepared;
            let voters = s.prepare_votes[&key].clone();
            s.commit_votes.entry(key).or_default().insert(me);
            let cert = CertEntry { round, view: key.0, proposal: p.clone(), voters, committed: false };
            if self.prepared.get(&round).map(|c| c.view < cert.view).unwrap_or(true) {
                self.prepared.insert(round, cert);
            }
            out.push(EngineOut::Broadcast(PbftMsg::Commit { view: key.0, round, digest: key.1 }));
            self.progress += 1;
        }
        let Some(s) = self.slots.get_mut(&round) else { return };
        // nf commits prove the round committed, prepared here or not.
        if s.phase < Phase::Committed {
            if let Some(voters) = s.commit_votes.get(&key) {
                if voters.len() >= nf {
                    s.phase = Phase::Committed;
                    let entry = CertEntry { round, view: key.0, proposal: p, voters: voters.clone(), committed: true };
                    self.decide(entry, out);
                }
            }
        }
    }

    fn decide(&mut self, entry: CertEntry, out: &mut Vec<EngineOut>) {
        if self.log.contains_key(&entry.round) {
            return;
        }
        if let Some(k) = entry.proposal.key() {
            self.keys_in_log.insert(k);
        }
        if let Some(s) = self.slots.get_mut(&entry.round) {
            s.phase = Phase::Committed;
        }
        self.log.insert(entry.round, entry);
        self.progress += 1;
        while let Some(e) = self.log.get(&self.next_deliver) {
            let p = match e.proposal.key() {
                Some(k) if !self.delivered_keys.insert(k) => Proposal::Null,
                _ => e.proposal.clone(),
            };
            out.push(EngineOut::Deliver(e.round, p));
            if let Some(s) = self.slots.get_mut(&e.round) {
                s.phase = Phase::Executed;
            }
            self.next_deliver += 1;
        }
        // Drop bookkeeping for executed rounds.
        let done = self.next_deliver;
        self.slots.retain(|r, _| *r >= done);
        self.prepared.retain(|r, _| *r >= done);
        if self.next_propose < self.next_deliver {
            self.next_propose = self.next_deliver;
        }
    }

    /// Periodic stall check. `app_work` tells whether the application holds
    /// requests that still need a round. The first silent tick asks peers for
    /// missed certificates; the second starts a view change.
    pub fn tick(&mut self, app_work: bool, out: &mut Vec<EngineOut>) {
        let progressed = self.progress != self.last_tick_progress;
        self.last_tick_progress = self.progress;
        if progressed {
            self.idle_ticks = 0;
            if self.status == Status::Normal {
                self.backoff = 0;
            }
            return;
        }
        // A view change on its own is not work: a replica left alone in one
        // waits for f+1 peers instead of escalating forever.
        let work = app_work || self.has_unfinished_rounds();
        if !work {
            self.idle_ticks = 0;
            return;
        }
        self.idle_ticks += 1;
        if self.idle_ticks == 1 {
            out.push(EngineOut::Broadcast(PbftMsg::Fetch { from: self.next_deliver }));
            return;
        }
        let target = match self.status {
            Status::Normal => self.view + 1,
            Status::Changing(t) => t + 1,
        };
        self.backoff = (self.backoff + 1).min(4);
        self.idle_ticks = 0;
        self.start_view_change(target, out);
    }

    fn cert_entries(&self) -> Vec<CertEntry> {
        let mut v: Vec<CertEntry> = self.log.values().cloned().collect();
        v.extend(self.prepared.iter().filter(|(r, _)| !self.log.contains_key(r)).map(|(_, c)| c.clone()));
        v.sort_by_key(|e| e.round);
        v
    }

    fn start_view_change(&mut self, target: View, out: &mut Vec<EngineOut>) {
        if let Status::Changing(t) = self.status {
            if t >= target {
                return;
            }
        }
        if target <= self.view {
            return;
        }
        self.status = Status::Changing(target);
        let low = self.low_water();
        let vc = Arc::new(ViewChange { view: target, from: self.me, low, entries: self.cert_entries_since(low) });
        self.view_changes.entry(target).or_default().insert(self.me, vc.clone());
        out.push(EngineOut::ViewChangeStarted(target));
        out.push(EngineOut::Broadcast(PbftMsg::ViewChange(vc)));
        self.try_new_view(target, out);
    }

    /// Lowest round a new view must cover. Everything below is committed here
    /// and reachable through `Fetch`.
    fn low_water(&self) -> Round {
        self.next_deliver.saturating_sub(self.window.width).max(1)
    }

    fn cert_entries_since(&self, low: Round) -> Vec<CertEntry> {
        self.cert_entries().into_iter().filter(|e| e.round >= low).collect()
    }

    fn on_view_change(&mut self, from: u32, vc: Arc<ViewChange>, out: &mut Vec<EngineOut>) {
        if vc.from != from || vc.view <= self.view {
            return;
        }
        self.view_changes.entry(vc.view).or_default().insert(from, vc.clone());
        // Join once f+1 replicas want a view above ours.
        let current_target = match self.status {
            Status::Normal => self.view,
            Status::Changing(t) => t,
        };
        let mut higher: BTreeMap<u32, View> = BTreeMap::new();
        for (v, m) in self.view_changes.range(current_target + 1..) {
            for j in m.keys() {
                higher.entry(*j).and_modify(|x| *x = (*x).min(*v)).or_insert(*v);
            }
        }
        higher.remove(&self.me);
        if higher.len() >= (self.cfg.f + 1) as usize {
            let mut views: Vec<View> = higher.values().copied().collect();
            views.sort();
            // Smallest view such that f+1 replicas asked for at least it.
            let join = views[views.len() - (self.cfg.f as usize + 1)];
            self.start_view_change(join, out);
        }
        self.try_new_view(vc.view, out);
    }

    fn new_view_entries(&self, vcs: &[Arc<ViewChange>]) -> Vec<NewViewEntry> {
        let mut best: BTreeMap<Round, CertEntry> = BTreeMap::new();
        for vc in vcs {
            for e in &vc.entries {
                if e.voters.len() < self.cfg.nf as usize {
                    continue;
                }
                match best.get(&e.round) {
                    Some(b) if b.committed => {}
                    Some(b) if !e.committed && b.view >= e.view => {}
                    _ => {
                        best.insert(e.round, e.clone());
                    }
                }
            }
        }
        // A round committed anywhere was prepared by a quorum, so some correct
        // sender reports it unless the round is below that sender's `low`.
        // Starting at the highest `low` never fills a committed round with
        // Null; everything below it was delivered by that sender.
        let low = Self::new_view_low(vcs);
        let high = best.keys().next_back().copied().unwrap_or(0);
        let mut entries = Vec::new();
        for r in low..=high {
            match best.get(&r) {
                Some(e) if e.committed => entries.push(NewViewEntry::Decided(e.clone())),
                Some(e) => entries.push(NewViewEntry::Repropose(r, e.proposal.clone())),
                None => entries.push(NewViewEntry::Repropose(r, Proposal::Null)),
            }
        }
        entries
    }

    fn new_view_low(vcs: &[Arc<ViewChange>]) -> Round {
        vcs.iter().map(|vc| vc.low).max().unwrap_or(1).max(1)
    }

    fn try_new_view(&mut self, target: View, out: &mut Vec<EngineOut>) {
        if self.cfg.primary(target) != self.me || self.sent_new_view.contains(&target) {
            return;
        }
        if self.status != Status::Changing(target) {
            return;
        }
        let Some(m) = self.view_changes.get(&target) else { return };
        if m.len() < self.cfg.nf as usize {
            return;
        }
        let vcs: Vec<Arc<ViewChange>> = m.values().take(self.cfg.nf as usize).cloned().collect();
        let entries = self.new_view_entries(&vcs);
        let nv = Arc::new(NewView { view: target, view_changes: vcs, entries });
        self.sent_new_view.insert(target);
        out.push(EngineOut::Broadcast(PbftMsg::NewView(nv.clone())));
        self.install(&nv, out);
    }

    fn on_new_view(&mut self, from: u32, nv: &Arc<NewView>, out: &mut Vec<EngineOut>) {
        if nv.view <= self.view || from != self.cfg.primary(nv.view) {
            return;
        }
        let senders: BTreeSet<u32> = nv.view_changes.iter().filter(|vc| vc.view == nv.view).map(|vc| vc.from).collect();
        if senders.len() < self.cfg.nf as usize || nv.view_changes.len() != senders.len() {
            return;
        }
        if self.new_view_entries(&nv.view_changes) != nv.entries {
            return;
        }
        self.install(nv, out);
    }

    fn install(&mut self, nv: &NewView, out: &mut Vec<EngineOut>) {
        let v = nv.view;
        self.view = v;
        self.status = Status::Normal;
        self.idle_ticks = 0;
        self.progress += 1;
        self.view_changes.retain(|w, _| *w > v);
        // Only committed rounds survive; everything else is re-run.
        self.slots.retain(|r, s| *r < 1 || s.phase >= Phase::Committed);
        let primary = self.cfg.primary(v);
        let me = self.me;
        let mut max_round = self.next_deliver.saturating_sub(1);
        out.push(EngineOut::ViewInstalled(v));
        for e in &nv.entries {
            match e {
                NewViewEntry::Decided(c) => {
                    max_round = max_round.max(c.round);
                    self.decide(c.clone(), out);
                }
                NewViewEntry::Repropose(r, p) => {
                    max_round = max_round.max(*r);
                    if self.log.contains_key(r) {
                        continue;
                    }
                    let d = p.digest();
                    let s = self.slot(*r);
                    *s = RoundSlot::new(*r, v);
                    s.proposal = Some(p.clone());
                    s.phase = Phase::Preprepared;
                    s.prepared_in.insert(v);
                    s.prepare_votes.entry((v, d)).or_default().insert(primary);
                    s.prepare_votes.entry((v, d)).or_default().insert(me);
                    if me != primary {
                        out.push(EngineOut::Broadcast(PbftMsg::Prepare { view: v, round: *r, digest: d }));
                    }
                    self.advance(*r, out);
                }
            }
        }
        let low = Self::new_view_low(&nv.view_changes);
        self.next_propose = (max_round + 1).max(self.next_deliver).max(low);
    }

    /// Start a view change right away (used by tests and by scripted faults).
    pub fn force_view_change(&mut self, out: &mut Vec<EngineOut>) {
        let t = match self.status {
            Status::Normal => self.view + 1,
            Status::Changing(t) => t + 1,
        };
        self.start_view_change(t, out);
    }
}

/// Destination side of cluster-sending: a value from shard `S` is accepted
/// once `f(S) + 1` distinct replicas of `S` sent identical copies, so the
/// faulty replicas of `S` alone cannot forge it.
#[derive(Clone, Debug, Default)]
pub struct ClusterReceiver<K: Ord + Clone, V: Ord + Clone> {
    votes: BTreeMap<(ShardId, K), BTreeMap<V, BTreeSet<u32>>>,
    accepted: BTreeMap<(ShardId, K), V>,
}

impl<K: Ord + Clone, V: Ord + Clone> ClusterReceiver<K, V> {
    pub fn new() -> Self {
        ClusterReceiver { votes: BTreeMap::new(), accepted: BTreeMap::new() }
    }

    /// Records one copy. Returns the value the first time it is accepted.
    pub fn offer(&mut self, from: &ShardConfig, sender_idx: u32, key: K, value: V) -> Option<V> {
        let k = (from.shard_id, key);
        if self.accepted.contains_key(&k) {
            return None;
        }
        let set = self.votes.entry(k.clone()).or_default().entry(value.clone()).or_default();
        set.insert(sender_idx);
        if set.len() > from.f as usize {
            self.votes.remove(&k);
            self.accepted.insert(k, value.clone());
            return Some(value);
        }
        None
    }

    pub fn accepted(&self, from: ShardId, key: &K) -> Option<&V> {
        self.accepted.get(&(from, key.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ClientId;
    use std::collections::VecDeque;

    fn cfg(n: u32, f: u32) -> Arc<ShardConfig> {
        Arc::new(ShardConfig::new(ShardId(0), n, f).unwrap())
    }

    fn txn(id: u64) -> Proposal {
        Proposal::Txn(Arc::new(
            Transaction::new(TxnId(id), ClientId(0), [crate::object_model::ObjectId::genesis(id as u32)], &[], BTreeMap::new()).unwrap(),
        ))
    }

    /// Synchronous in-memory driver for a single shard. `faulty` replicas drop
    /// everything they would send; `primary_script` lets a faulty primary
    /// send chosen preprepares.
    struct Harness {
        nodes: Vec<Pbft>,
        faulty: BTreeSet<u32>,
        queue: VecDeque<(u32, u32, PbftMsg)>,
        delivered: Vec<Vec<(Round, Proposal)>>,
        view_changes: usize,
    }

    impl Harness {
        fn new(n: u32, f: u32, faulty: &[u32]) -> Self {
            let c = cfg(n, f);
            Harness {
                nodes: (0..n).map(|i| Pbft::new(c.clone(), i, ProposalWindow::default())).collect(),
                faulty: faulty.iter().copied().collect(),
                queue: VecDeque::new(),
                delivered: vec![vec![]; n as usize],
                view_changes: 0,
            }
        }

        fn absorb(&mut self, from: u32, outs: Vec<EngineOut>) {
            if self.faulty.contains(&from) {
                return;
            }
            for o in outs {
                match o {
                    EngineOut::Broadcast(m) => {
                        for j in 0..self.nodes.len() as u32 {
                            if j != from {
                                self.queue.push_back((from, j, m.clone()));
                            }
                        }
                    }
                    EngineOut::SendTo(j, m) => self.queue.push_back((from, j, m)),
                    EngineOut::Deliver(r, p) => self.delivered[from as usize].push((r, p)),
                    EngineOut::ViewInstalled(_) => self.view_changes += 1,
                    EngineOut::ViewChangeStarted(_) => {}
                }
            }
        }

        fn run(&mut self) {
            let accept = |_: Round, _: &Proposal| Verdict::Accept;
            while let Some((from, to, m)) = self.queue.pop_front() {
                let mut out = vec![];
                self.nodes[to as usize].on_message(from, &m, &accept, &mut out);
                self.absorb(to, out);
            }
        }

        fn tick_all(&mut self, work: bool) {
            for i in 0..self.nodes.len() as u32 {
                let mut out = vec![];
                self.nodes[i as usize].tick(work, &mut out);
                self.absorb(i, out);
            }
            self.run();
        }

        /// Enough silent ticks for a stall to turn into a view change.
        fn stall(&mut self, work: bool) {
            for _ in 0..3 {
                self.tick_all(work);
            }
        }

        fn good(&self) -> Vec<u32> {
            (0..self.nodes.len() as u32).filter(|i| !self.faulty.contains(i)).collect()
        }
    }

    #[test]
    fn config_requires_n_above_3f() {
        assert!(ShardConfig::new(ShardId(0), 3, 1).is_err());
        let c = ShardConfig::new(ShardId(0), 7, 2).unwrap();
        assert_eq!((c.nf, c.client_quorum()), (5, 3));
        assert_eq!(c.primary(8), 1);
    }

    #[test]
    fn failure_free_round() {
        let mut h = Harness::new(4, 1, &[]);
        let mut out = vec![];
        h.nodes[0].propose(txn(1), &mut out);
        h.absorb(0, out);
        h.run();
        for i in 0..4 {
            assert_eq!(h.delivered[i], vec![(1, txn(1))]);
        }
    }

    #[test]
    fn equivocating_primary_triggers_view_change() {
        let mut h = Harness::new(4, 1, &[0]);
        // Primary 0 sends X to replicas 1,2 and Y to replica 3 (and itself).
        for (j, p) in [(1, txn(1)), (2, txn(1)), (3, txn(2))] {
            h.queue.push_back((0, j, PbftMsg::PrePrepare { view: 0, round: 1, proposal: p }));
        }
        h.run();
        // Replicas 1 and 2 prepare X; with one faulty silent replica there
        // are only 2 of the 3 needed prepares, nothing is decided.
        assert!(h.good().iter().all(|i| h.delivered[*i as usize].is_empty()));
        h.stall(true);
        assert!(h.view_changes >= 3);
        for i in h.good() {
            assert_eq!(h.nodes[i as usize].view, 1);
        }
        // New primary 1 re-proposes.
        let mut out = vec![];
        h.nodes[1].propose(txn(1), &mut out);
        h.absorb(1, out);
        h.run();
        for i in h.good() {
            let d = &h.delivered[i as usize];
            assert!(d.iter().any(|(_, p)| *p == txn(1)), "replica {i} got {d:?}");
        }
    }

    #[test]
    fn ignored_request_forces_consensus_via_view_change() {
        // Primary 0 is faulty and silent; good replicas hold a request.
        let mut h = Harness::new(4, 1, &[0]);
        h.stall(true);
        for i in h.good() {
            assert_eq!(h.nodes[i as usize].view, 1);
        }
        assert!(h.nodes[1].is_primary());
        let mut out = vec![];
        h.nodes[1].propose(txn(7), &mut out);
        h.absorb(1, out);
        h.run();
        for i in h.good() {
            assert_eq!(h.delivered[i as usize], vec![(1, txn(7))]);
        }
    }

    #[test]
    fn prepared_round_survives_view_change() {
        let mut h = Harness::new(4, 1, &[]);
        let mut out = vec![];
        h.nodes[0].propose(txn(1), &mut out);
        h.absorb(0, out);
        // Deliver preprepares and prepares but drop all commits.
        while let Some((from, to, m)) = h.queue.pop_front() {
            if matches!(m, PbftMsg::Commit { .. }) {
                continue;
            }
            let mut out = vec![];
            let accept = |_: Round, _: &Proposal| Verdict::Accept;
            h.nodes[to as usize].on_message(from, &m, &accept, &mut out);
            h.absorb(to, out);
        }
        assert!(h.delivered.iter().all(|d| d.is_empty()));
        h.stall(false);
        for i in 0..4 {
            assert_eq!(h.delivered[i], vec![(1, txn(1))], "replica {i}");
        }
    }

    #[test]
    fn lagging_replica_catches_up_with_fetch() {
        let mut h = Harness::new(4, 1, &[]);
        let mut out = vec![];
        h.nodes[0].propose(txn(1), &mut out);
        h.absorb(0, out);
        // Replica 3 receives nothing.
        while let Some((from, to, m)) = h.queue.pop_front() {
            if to == 3 {
                continue;
            }
            let mut out = vec![];
            let accept = |_: Round, _: &Proposal| Verdict::Accept;
            h.nodes[to as usize].on_message(from, &m, &accept, &mut out);
            h.absorb(to, out);
        }
        assert!(h.delivered[3].is_empty());
        let mut out = vec![];
        h.nodes[3].tick(true, &mut out);
        h.absorb(3, out);
        h.run();
        assert_eq!(h.delivered[3], vec![(1, txn(1))]);
    }

    /// Exhaustive check over every split of prepare votes: with nf > 2f no two
    /// different digests can both reach nf prepares, because good replicas
    /// vote once and faulty ones may vote for both.
    #[test]
    fn no_conflicting_prepare_certificates() {
        for (n, f) in [(4u32, 1u32), (7, 2), (10, 3)] {
            let nf = n - f;
            let good = n - f;
            // Each good replica votes X, Y or nothing; faulty always vote both.
            let combos = 3u64.pow(good);
            for mask in 0..combos {
                let (mut x, mut y) = (f, f);
                let mut m = mask;
                for _ in 0..good {
                    match m % 3 {
                        0 => x += 1,
                        1 => y += 1,
                        _ => {}
                    }
                    m /= 3;
                }
                assert!(!(x >= nf && y >= nf), "n={n} f={f} split x={x} y={y}");
            }
        }
    }

    #[test]
    fn cluster_receiver_needs_f_plus_one() {
        let from = ShardConfig::new(ShardId(1), 7, 2).unwrap();
        let mut rx: ClusterReceiver<u64, u32> = ClusterReceiver::new();
        // Two faulty senders push a forged value: not enough.
        assert_eq!(rx.offer(&from, 5, 1, 99), None);
        assert_eq!(rx.offer(&from, 6, 1, 99), None);
        assert_eq!(rx.offer(&from, 6, 1, 99), None);
        // Three good senders agree.
        assert_eq!(rx.offer(&from, 0, 1, 7), None);
        assert_eq!(rx.offer(&from, 1, 1, 7), None);
        assert_eq!(rx.offer(&from, 2, 1, 7), Some(7));
        // Accepted once only.
        assert_eq!(rx.offer(&from, 3, 1, 7), None);
        assert_eq!(rx.accepted(ShardId(1), &1), Some(&7));
    }

    #[test]
    fn window_admission() {
        let w = ProposalWindow { width: 16 };
        assert!(w.admits(16, 1));
        assert!(!w.admits(17, 1));
    }
}
