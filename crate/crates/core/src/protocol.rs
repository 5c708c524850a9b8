//! Shared runtime for the three protocols: wire messages, protocol events,
//! the node interface, clients, Byzantine mutations and the event loop.

use crate::ccb::InputsPledge;
use crate::consensus::{PbftMsg, Proposal, ProposalWindow, ShardConfig};
use crate::ids::{ClientId, Decision, NodeId, Protocol, ReplicaId, Round, ShardId, Time, TxnId, View};
use crate::object_model::{shards_of, validate, Directory, Keyring, Ledger, ObjectId, ShardAssignment, Transaction};
use crate::ocb::OcbMsg;
use crate::sim::{
    AdversaryScript, Envelope, MsgMeta, NetStats, Network, NetworkConfig, Payload, ReliabilityWindow, SimEvent, Trace,
    TraceHeader, TraceLevel, TraceRecord, TRACE_VERSION,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

#[derive(Clone, Debug)]
pub enum Msg {
    Request(Arc<Transaction>),
    Inform { txn: TxnId, shard: ShardId, decision: Decision },
    Pbft { shard: ShardId, msg: PbftMsg },
    ClusterSend(Arc<InputsPledge>),
    /// Asks a shard to re-send its pledge for `txn`; carries the transaction
    /// so a shard that never saw it can start processing it.
    ExchangePull { txn: Arc<Transaction>, want: ShardId },
    Ocb(OcbMsg),
}

impl Payload for Msg {
    fn meta(&self) -> MsgMeta {
        match self {
            Msg::Request(t) => MsgMeta { msg_type: "Request", txn_id: Some(t.id), ..Default::default() },
            Msg::Inform { txn, shard, decision } => MsgMeta {
                msg_type: "Inform",
                txn_id: Some(*txn),
                shard: Some(*shard),
                decision: Some(*decision),
                ..Default::default()
            },
            Msg::Pbft { shard, msg } => {
                let txn_id = match msg {
                    PbftMsg::PrePrepare { proposal, .. } => proposal.txn_id(),
                    _ => None,
                };
                MsgMeta { msg_type: msg.tag(), round: msg.round(), view: msg.view(), shard: Some(*shard), txn_id, decision: None }
            }
            Msg::ClusterSend(p) => MsgMeta {
                msg_type: "ClusterSend",
                round: Some(p.round),
                shard: Some(p.shard),
                txn_id: Some(p.txn.id),
                ..Default::default()
            },
            Msg::ExchangePull { txn, want } => {
                MsgMeta { msg_type: "ExchangePull", shard: Some(*want), txn_id: Some(txn.id), ..Default::default() }
            }
            Msg::Ocb(m) => m.meta(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    /// The step that fixes local inputs.
    Inputs,
    /// The pessimistic protocol's outcome step.
    Outcome,
}

/// Structured protocol events, recorded by the runner for the checkers.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    /// A primary sent a proposal for `txn`.
    Proposed { time: Time, replica: ReplicaId, txn: TxnId, view: View, round: Round },
    /// A consensus decision of this replica's shard concerns `txn`.
    Accepted { time: Time, replica: ReplicaId, txn: TxnId, round: Round, kind: SlotKind },
    /// Request ignored (invalid, not involved, ...).
    Discarded { time: Time, replica: ReplicaId, txn: TxnId, reason: &'static str },
    Pledged { time: Time, replica: ReplicaId, txn: TxnId, round: Round, full: bool },
    Decided {
        time: Time,
        replica: ReplicaId,
        txn: TxnId,
        decision: Decision,
        round: Round,
        outcome_round: Option<Round>,
    },
    /// Objects removed from and added to the replica's ledger.
    Applied { time: Time, replica: ReplicaId, txn: TxnId, consumed: Vec<ObjectId>, constructed: Vec<ObjectId> },
    /// Objects put back by a rollback.
    RolledBack { time: Time, replica: ReplicaId, txn: TxnId, restored: Vec<ObjectId> },
    ViewChange { time: Time, replica: ReplicaId, view: View },
    /// The replica finished the global prepare phase for the certificate
    /// with `digest`, whose per-shard preprepares occupy `slots`.
    GlobalCommitPhase { time: Time, replica: ReplicaId, txn: TxnId, digest: [u8; 32], slots: Vec<(ShardId, View, Round)> },
    /// The replica will not propose `txn` again.
    Dropped { time: Time, replica: ReplicaId, txn: TxnId },
    ClientConfirmed { time: Time, client: ClientId, txn: TxnId, shard: ShardId, decision: Decision },
}

impl Event {
    pub fn time(&self) -> Time {
        match self {
            Event::Proposed { time, .. }
            | Event::Accepted { time, .. }
            | Event::Discarded { time, .. }
            | Event::Pledged { time, .. }
            | Event::Decided { time, .. }
            | Event::Applied { time, .. }
            | Event::RolledBack { time, .. }
            | Event::ViewChange { time, .. }
            | Event::GlobalCommitPhase { time, .. }
            | Event::Dropped { time, .. }
            | Event::ClientConfirmed { time, .. } => *time,
        }
    }

    pub fn replica(&self) -> Option<ReplicaId> {
        match self {
            Event::Proposed { replica, .. }
            | Event::Accepted { replica, .. }
            | Event::Discarded { replica, .. }
            | Event::Pledged { replica, .. }
            | Event::Decided { replica, .. }
            | Event::Applied { replica, .. }
            | Event::RolledBack { replica, .. }
            | Event::ViewChange { replica, .. }
            | Event::GlobalCommitPhase { replica, .. }
            | Event::Dropped { replica, .. } => Some(*replica),
            Event::ClientConfirmed { .. } => None,
        }
    }

    fn record(&self, protocol: Protocol) -> TraceRecord {
        let base = TraceRecord { time: self.time(), sender: self.replica().map(|r| r.to_string()), ..Default::default() };
        match self {
            Event::Proposed { txn, view, round, replica, .. } => TraceRecord {
                kind: "propose".into(),
                txn_id: Some(txn.0),
                view: Some(*view),
                round: Some(*round),
                shard: Some(replica.shard.0),
                ..base
            },
            Event::Accepted { txn, round, kind, replica, .. } => TraceRecord {
                kind: "accept".into(),
                txn_id: Some(txn.0),
                round: Some(*round),
                shard: Some(replica.shard.0),
                detail: Some(format!("{kind:?}").to_lowercase()),
                ..base
            },
            Event::Discarded { txn, reason, replica, .. } => TraceRecord {
                kind: "discard".into(),
                txn_id: Some(txn.0),
                shard: Some(replica.shard.0),
                detail: Some(reason.to_string()),
                ..base
            },
            Event::Pledged { txn, round, full, replica, .. } => TraceRecord {
                kind: "pledge".into(),
                txn_id: Some(txn.0),
                round: Some(*round),
                shard: Some(replica.shard.0),
                detail: Some(if *full { "full" } else { "deficient" }.into()),
                ..base
            },
            Event::Decided { txn, decision, round, outcome_round, replica, .. } => {
                let pcb = protocol == Protocol::Pcb;
                TraceRecord {
                    kind: "decide".into(),
                    protocol: Some(protocol.name().into()),
                    txn_id: Some(txn.0),
                    decision: Some(*decision),
                    shard: Some(replica.shard.0),
                    round: Some(outcome_round.unwrap_or(*round)),
                    pledge_round: pcb.then_some(*round),
                    outcome_round: if pcb { Some(outcome_round.unwrap_or(*round)) } else { None },
                    ..base
                }
            }
            Event::Applied { txn, consumed, constructed, replica, .. } => TraceRecord {
                kind: "apply".into(),
                txn_id: Some(txn.0),
                shard: Some(replica.shard.0),
                detail: Some(format!("consumed={} constructed={}", list(consumed), list(constructed))),
                ..base
            },
            Event::RolledBack { txn, restored, replica, .. } => TraceRecord {
                kind: "rollback".into(),
                txn_id: Some(txn.0),
                shard: Some(replica.shard.0),
                detail: Some(format!("restored={}", list(restored))),
                ..base
            },
            Event::ViewChange { view, replica, .. } => {
                TraceRecord { kind: "view_change".into(), view: Some(*view), shard: Some(replica.shard.0), ..base }
            }
            Event::GlobalCommitPhase { txn, slots, replica, .. } => TraceRecord {
                kind: "global_commit_phase".into(),
                txn_id: Some(txn.0),
                shard: Some(replica.shard.0),
                detail: Some(
                    slots.iter().map(|(s, v, r)| format!("{s}:v{v}:r{r}")).collect::<Vec<_>>().join(","),
                ),
                ..base
            },
            Event::Dropped { txn, replica, .. } => {
                TraceRecord { kind: "drop_txn".into(), txn_id: Some(txn.0), shard: Some(replica.shard.0), ..base }
            }
            Event::ClientConfirmed { client, txn, shard, decision, .. } => TraceRecord {
                kind: "confirm".into(),
                receiver: Some(client.to_string()),
                txn_id: Some(txn.0),
                shard: Some(shard.0),
                decision: Some(*decision),
                ..base
            },
        }
    }
}

fn list(v: &[ObjectId]) -> String {
    v.iter().map(|o| o.to_string()).collect::<Vec<_>>().join("|")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timing {
    /// Ticks without progress before a replica suspects a stall.
    pub view_timeout: Time,
    /// Interval for pulling missing cross-shard pledges.
    pub retransmit: Time,
    pub client_timeout: Time,
    pub client_retries: u32,
    /// Pulls for one transaction before giving up.
    pub max_pulls: u32,
}

impl Default for Timing {
    fn default() -> Self {
        Timing { view_timeout: 50, retransmit: 20, client_timeout: 400, client_retries: 8, max_pulls: 40 }
    }
}

/// Everything every node may consult: shard layout, placement, keys.
#[derive(Clone, Debug)]
pub struct Topology {
    pub shards: BTreeMap<ShardId, Arc<ShardConfig>>,
    pub assign: ShardAssignment,
    pub keyring: Keyring,
    pub directory: Directory,
    /// Initial ledger of every shard.
    pub genesis: BTreeMap<ShardId, Ledger>,
    pub timing: Timing,
    pub window: ProposalWindow,
    /// Failed global rounds a transaction may take part in before it is
    /// dropped (optimistic protocol).
    pub ocb_max_attempts: u32,
}

impl Topology {
    pub fn shard(&self, s: ShardId) -> &Arc<ShardConfig> {
        &self.shards[&s]
    }

    pub fn shards_of(&self, t: &Transaction) -> BTreeSet<ShardId> {
        shards_of(t, &self.assign)
    }

    /// Replica-side admission: well-formed, involves `shard`, and every
    /// input carries a genuine owner token.
    pub fn admissible(&self, t: &Transaction, shard: ShardId) -> Result<(), &'static str> {
        if t.check_well_formed().is_err() {
            return Err("malformed");
        }
        if !self.shards_of(t).contains(&shard) {
            return Err("not-involved");
        }
        if !validate(t, &self.directory, &self.keyring).fully_supported() {
            return Err("unsupported");
        }
        Ok(())
    }

    pub fn replicas_of(&self, s: ShardId) -> impl Iterator<Item = NodeId> + '_ {
        self.shards[&s].replicas.iter().map(|r| NodeId::Replica(*r))
    }
}

/// Per-call output buffer handed to node handlers.
pub struct Ctx<'a> {
    pub now: Time,
    pub me: NodeId,
    pub topo: &'a Topology,
    sends: Vec<(NodeId, Msg)>,
    timers: Vec<(Time, u64)>,
    events: Vec<Event>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: Time, me: NodeId, topo: &'a Topology) -> Self {
        Ctx { now, me, topo, sends: Vec::new(), timers: Vec::new(), events: Vec::new() }
    }

    pub fn send(&mut self, to: NodeId, m: Msg) {
        if to != self.me {
            self.sends.push((to, m));
        }
    }

    /// To every replica of `shard` except the caller.
    pub fn send_shard(&mut self, shard: ShardId, m: &Msg) {
        for r in &self.topo.shards[&shard].replicas {
            self.send(NodeId::Replica(*r), m.clone());
        }
    }

    pub fn timer(&mut self, after: Time, id: u64) {
        self.timers.push((after, id));
    }

    pub fn event(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn replica(&self) -> ReplicaId {
        match self.me {
            NodeId::Replica(r) => r,
            NodeId::Client(_) => panic!("not a replica"),
        }
    }

    pub fn take(self) -> (Vec<(NodeId, Msg)>, Vec<(Time, u64)>, Vec<Event>) {
        (self.sends, self.timers, self.events)
    }
}

pub trait Node {
    fn on_start(&mut self, _ctx: &mut Ctx) {}
    fn on_message(&mut self, ctx: &mut Ctx, from: NodeId, msg: Msg);
    fn on_timer(&mut self, ctx: &mut Ctx, id: u64);
    fn ledger(&self) -> Option<&Ledger> {
        None
    }
}

/// Content-changing misbehaviour of corrupted replicas. Dropping, delaying
/// and withholding are network rules in the adversary script.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByzConfig {
    /// As primary, send a conflicting proposal to odd-indexed receivers.
    #[serde(default)]
    pub equivocate: bool,
    /// Flip the available set of outgoing pledges.
    #[serde(default)]
    pub forge_pledge: bool,
    /// Flip outgoing client notifications.
    #[serde(default)]
    pub fake_inform: bool,
}

impl ByzConfig {
    pub fn is_noop(&self) -> bool {
        *self == ByzConfig::default()
    }

    fn mutate(&self, to: NodeId, m: Msg) -> Msg {
        let odd = matches!(to, NodeId::Replica(r) if r.idx % 2 == 1);
        match m {
            Msg::Pbft { shard, msg: PbftMsg::PrePrepare { view, round, proposal } } if self.equivocate && odd => {
                let alt = match proposal {
                    Proposal::Outcome { txn, commit } => Proposal::Outcome { txn, commit: !commit },
                    _ => Proposal::Null,
                };
                Msg::Pbft { shard, msg: PbftMsg::PrePrepare { view, round, proposal: alt } }
            }
            Msg::Ocb(OcbMsg::GPrePrepare(pp)) if self.equivocate && odd => Msg::Ocb(OcbMsg::GPrePrepare(Arc::new(pp.flipped()))),
            Msg::ClusterSend(p) if self.forge_pledge => Msg::ClusterSend(Arc::new(p.flipped())),
            Msg::Inform { txn, shard, decision } if self.fake_inform => Msg::Inform {
                txn,
                shard,
                decision: match decision {
                    Decision::Commit => Decision::Abort,
                    Decision::Abort => Decision::Commit,
                },
            },
            other => other,
        }
    }
}

const TIMER_ARRIVAL: u64 = 1 << 40;
const TIMER_RETRY: u64 = 2 << 40;

#[derive(Clone, Debug)]
pub struct ClientTxn {
    pub txn: Arc<Transaction>,
    pub at: Time,
    /// Shards the client sends the request to; `None` is every involved shard.
    pub targets: Option<BTreeSet<ShardId>>,
}

struct ClientState {
    txn: Arc<Transaction>,
    targets: BTreeSet<ShardId>,
    votes: BTreeMap<ShardId, BTreeMap<Decision, BTreeSet<u32>>>,
    confirmed: BTreeMap<ShardId, Decision>,
    retries: u32,
}

/// A client submits its transactions and waits for `nf - f` matching
/// notifications from every involved shard.
pub struct Client {
    pub id: ClientId,
    schedule: Vec<ClientTxn>,
    states: BTreeMap<TxnId, ClientState>,
    /// Clients that follow the protocol retry unconfirmed requests.
    pub retry: bool,
}

impl Client {
    pub fn new(id: ClientId, schedule: Vec<ClientTxn>, retry: bool) -> Self {
        Client { id, schedule, states: BTreeMap::new(), retry }
    }

    fn submit(&mut self, ctx: &mut Ctx, idx: usize) {
        let ct = self.schedule[idx].clone();
        let involved = ctx.topo.shards_of(&ct.txn);
        let targets = ct.targets.clone().unwrap_or_else(|| involved.clone());
        for s in &targets {
            if let Some(cfg) = ctx.topo.shards.get(s) {
                for r in &cfg.replicas {
                    ctx.send(NodeId::Replica(*r), Msg::Request(ct.txn.clone()));
                }
            }
        }
        self.states.insert(
            ct.txn.id,
            ClientState { txn: ct.txn.clone(), targets: involved, votes: BTreeMap::new(), confirmed: BTreeMap::new(), retries: 0 },
        );
        if self.retry {
            ctx.timer(ctx.topo.timing.client_timeout, TIMER_RETRY | idx as u64);
        }
    }
}

impl Node for Client {
    fn on_start(&mut self, ctx: &mut Ctx) {
        for (i, ct) in self.schedule.iter().enumerate() {
            ctx.timer(ct.at.max(1), TIMER_ARRIVAL | i as u64);
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx, from: NodeId, msg: Msg) {
        let Msg::Inform { txn, shard, decision } = msg else { return };
        let NodeId::Replica(r) = from else { return };
        if r.shard != shard {
            return;
        }
        let Some(st) = self.states.get_mut(&txn) else { return };
        if !st.targets.contains(&shard) || st.confirmed.contains_key(&shard) {
            return;
        }
        let need = ctx.topo.shard(shard).client_quorum() as usize;
        let set = st.votes.entry(shard).or_default().entry(decision).or_default();
        set.insert(r.idx);
        if set.len() >= need {
            st.confirmed.insert(shard, decision);
            ctx.event(Event::ClientConfirmed { time: ctx.now, client: self.id, txn, shard, decision });
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, id: u64) {
        let idx = (id & ((1 << 40) - 1)) as usize;
        if id & TIMER_ARRIVAL != 0 {
            self.submit(ctx, idx);
            return;
        }
        let Some(ct) = self.schedule.get(idx) else { return };
        let Some(st) = self.states.get_mut(&ct.txn.id) else { return };
        let missing: Vec<ShardId> = st.targets.iter().filter(|s| !st.confirmed.contains_key(s)).copied().collect();
        if missing.is_empty() || st.retries >= ctx.topo.timing.client_retries {
            return;
        }
        st.retries += 1;
        let txn = st.txn.clone();
        for s in missing {
            for r in &ctx.topo.shards[&s].replicas {
                ctx.send(NodeId::Replica(*r), Msg::Request(txn.clone()));
            }
        }
        let backoff = ctx.topo.timing.client_timeout << st.retries.min(3);
        ctx.timer(backoff, id);
    }
}

/// One complete simulation input.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub scenario: String,
    pub topo: Arc<Topology>,
    pub net: NetworkConfig,
    pub script: AdversaryScript,
    pub byz: ByzConfig,
    pub seed: u64,
    pub trace_level: TraceLevel,
    /// Hard stop for runs that never quiesce.
    pub max_time: Time,
    pub workload: Vec<ClientTxn>,
}

#[derive(Debug)]
pub struct RunResult {
    pub protocol: Protocol,
    pub topo: Arc<Topology>,
    pub events: Vec<Event>,
    pub catalog: BTreeMap<TxnId, Arc<Transaction>>,
    pub ledgers: BTreeMap<ReplicaId, Ledger>,
    pub corrupted: BTreeSet<ReplicaId>,
    /// No correct node had a pending timer or message when the run ended.
    pub quiescent: bool,
    pub end_time: Time,
    /// The reliability window in force at the end of the run, if any.
    pub final_window: Option<ReliabilityWindow>,
    pub stats: NetStats,
    /// Cross-shard replica-to-replica message types seen per transaction.
    pub cross_shard_types: BTreeMap<TxnId, BTreeSet<&'static str>>,
    pub trace: Trace,
}

impl RunResult {
    pub fn is_good(&self, r: ReplicaId) -> bool {
        !self.corrupted.contains(&r)
    }

    /// Decision of `txn` at good replicas, by shard.
    pub fn decisions(&self, txn: TxnId) -> BTreeMap<ShardId, BTreeSet<Decision>> {
        let mut m: BTreeMap<ShardId, BTreeSet<Decision>> = BTreeMap::new();
        for e in &self.events {
            if let Event::Decided { replica, txn: t, decision, .. } = e {
                if *t == txn && self.is_good(*replica) {
                    m.entry(replica.shard).or_default().insert(*decision);
                }
            }
        }
        m
    }

    /// Transactions every involved good replica decided to commit.
    pub fn committed(&self) -> BTreeSet<TxnId> {
        let mut c = BTreeSet::new();
        for e in &self.events {
            if let Event::Decided { replica, txn, decision: Decision::Commit, .. } = e {
                if self.is_good(*replica) {
                    c.insert(*txn);
                }
            }
        }
        c
    }

    pub fn view_changes(&self, shard: ShardId) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::ViewChange { replica, .. } if replica.shard == shard && self.is_good(*replica)))
            .count()
    }
}

pub fn build_node(protocol: Protocol, r: ReplicaId, topo: &Arc<Topology>) -> Box<dyn Node> {
    match protocol {
        Protocol::Ccb => Box::new(crate::ccb::CcbReplica::new(r, topo)),
        Protocol::Pcb => Box::new(crate::pcb::PcbReplica::new(r, topo)),
        Protocol::Ocb => Box::new(crate::ocb::OcbReplica::new(r, topo)),
    }
}

/// Runs one simulation to quiescence (or `max_time`).
pub fn run(cfg: RunConfig) -> RunResult {
    let header = TraceHeader {
        trace_version: TRACE_VERSION,
        protocol: cfg.protocol.name().into(),
        scenario: cfg.scenario.clone(),
        seed: cfg.seed,
    };
    let trace = Trace::new(header, cfg.trace_level);
    let mut net: Network<Msg> = Network::new(cfg.net.clone(), cfg.script.clone(), cfg.seed, trace);
    let topo = cfg.topo.clone();
    let mut nodes: BTreeMap<NodeId, Box<dyn Node>> = BTreeMap::new();
    for s in topo.shards.values() {
        for r in &s.replicas {
            nodes.insert(NodeId::Replica(*r), build_node(cfg.protocol, *r, &topo));
        }
    }
    let mut per_client: BTreeMap<ClientId, Vec<ClientTxn>> = BTreeMap::new();
    let mut catalog = BTreeMap::new();
    for ct in &cfg.workload {
        per_client.entry(ct.txn.client).or_default().push(ct.clone());
        catalog.insert(ct.txn.id, ct.txn.clone());
    }
    for (c, sched) in per_client {
        let retry = topo.directory.is_well_behaved(c);
        nodes.insert(NodeId::Client(c), Box::new(Client::new(c, sched, retry)));
    }
    let corrupted: BTreeSet<ReplicaId> = cfg.script.corrupted.values().flatten().copied().collect();
    let mut events = Vec::new();
    let mut cross: BTreeMap<TxnId, BTreeSet<&'static str>> = BTreeMap::new();

    let ids: Vec<NodeId> = nodes.keys().copied().collect();
    for id in ids {
        let mut ctx = Ctx::new(0, id, &topo);
        nodes.get_mut(&id).unwrap().on_start(&mut ctx);
        flush(&mut net, &cfg, id, ctx, &corrupted, &mut events, &mut cross);
    }

    let mut quiescent = false;
    loop {
        match net.step() {
            SimEvent::Quiescent => {
                quiescent = true;
                break;
            }
            SimEvent::Delivered(env) => {
                if net.now() > cfg.max_time {
                    break;
                }
                let Some(node) = nodes.get_mut(&env.receiver) else { continue };
                let mut ctx = Ctx::new(net.now(), env.receiver, &topo);
                node.on_message(&mut ctx, env.sender, env.payload);
                flush(&mut net, &cfg, env.receiver, ctx, &corrupted, &mut events, &mut cross);
            }
            SimEvent::Timer { node, timer, at } => {
                if at > cfg.max_time {
                    break;
                }
                let Some(n) = nodes.get_mut(&node) else { continue };
                let mut ctx = Ctx::new(at, node, &topo);
                n.on_timer(&mut ctx, timer);
                flush(&mut net, &cfg, node, ctx, &corrupted, &mut events, &mut cross);
            }
        }
    }

    // Timers of corrupted replicas and their chatter may run forever; the
    // run counts as quiescent once no correct node has anything left.
    if !quiescent {
        quiescent = !net.pending_within(|n| !matches!(n, NodeId::Replica(r) if corrupted.contains(&r)));
    }
    let end_time = net.now();
    let ledgers = nodes
        .iter()
        .filter_map(|(id, n)| match id {
            NodeId::Replica(r) => n.ledger().map(|l| (*r, l.clone())),
            NodeId::Client(_) => None,
        })
        .collect();
    let final_window = cfg.net.window_at(end_time).copied();
    RunResult {
        protocol: cfg.protocol,
        topo,
        events,
        catalog,
        ledgers,
        corrupted,
        quiescent,
        end_time,
        final_window,
        stats: net.stats.clone(),
        cross_shard_types: cross,
        trace: net.trace,
    }
}

fn flush(
    net: &mut Network<Msg>,
    cfg: &RunConfig,
    from: NodeId,
    ctx: Ctx,
    corrupted: &BTreeSet<ReplicaId>,
    events: &mut Vec<Event>,
    cross: &mut BTreeMap<TxnId, BTreeSet<&'static str>>,
) {
    let (sends, timers, evs) = ctx.take();
    let bad = matches!(from, NodeId::Replica(r) if corrupted.contains(&r));
    for (to, m) in sends {
        let m = if bad && !cfg.byz.is_noop() { cfg.byz.mutate(to, m) } else { m };
        if let (NodeId::Replica(a), NodeId::Replica(b)) = (from, to) {
            if a.shard != b.shard {
                if let Some(t) = m.meta().txn_id {
                    cross.entry(t).or_default().insert(m.meta().msg_type);
                }
            }
        }
        net.send(Envelope { sender: from, receiver: to, payload: m, sent_at: 0, authenticated: false });
    }
    for (after, id) in timers {
        net.schedule_timer(from, after, id);
    }
    for e in evs {
        net.trace.push(e.record(cfg.protocol));
        events.push(e);
    }
}
