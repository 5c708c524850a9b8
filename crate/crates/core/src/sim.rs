//! Deterministic discrete-event message fabric.
//!
//! Logical time only. Every delivery and timer sits in one priority queue
//! ordered by `(deliver_time, sequence)`, and all randomness comes from a
//! single seeded ChaCha stream, so equal inputs give byte-identical traces.

use crate::ids::{Decision, NodeId, ReplicaId, Round, ShardId, Time, TxnId, View};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

pub const TRACE_VERSION: u32 = 1;

/// Trace-visible summary of a message.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MsgMeta {
    pub msg_type: &'static str,
    pub round: Option<Round>,
    pub view: Option<View>,
    pub shard: Option<ShardId>,
    pub txn_id: Option<TxnId>,
    pub decision: Option<Decision>,
}

pub trait Payload: Clone {
    fn meta(&self) -> MsgMeta;
}

#[derive(Clone, Debug)]
pub struct Envelope<M> {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload: M,
    pub sent_at: Time,
    /// Set by the fabric. Good replicas' messages cannot be forged, so an
    /// authenticated envelope really comes from `sender`.
    pub authenticated: bool,
}

#[derive(Clone, Debug)]
pub enum SimEvent<M> {
    Delivered(Envelope<M>),
    Timer { node: NodeId, timer: u64, at: Time },
    /// Queue empty; nothing will ever happen again.
    Quiescent,
}

enum Item<M> {
    Deliver(Envelope<M>),
    Timer { node: NodeId, timer: u64 },
}

struct Queued<M> {
    at: Time,
    seq: u64,
    item: Item<M>,
}

impl<M> PartialEq for Queued<M> {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl<M> Eq for Queued<M> {}
impl<M> PartialOrd for Queued<M> {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl<M> Ord for Queued<M> {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

/// Logical clock plus the pending-event queue.
pub struct SimClock<M> {
    pub now: Time,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued<M>>>,
}

impl<M> Default for SimClock<M> {
    fn default() -> Self {
        SimClock { now: 0, seq: 0, queue: BinaryHeap::new() }
    }
}

impl<M> SimClock<M> {
    fn push(&mut self, at: Time, item: Item<M>) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Queued { at: at.max(self.now), seq, item }));
    }

    fn pop(&mut self) -> Option<(Time, Item<M>)> {
        let Reverse(q) = self.queue.pop()?;
        self.now = q.at;
        Some((q.at, q.item))
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Whether any queued timer belongs to a node in `set`, or any queued
    /// message has both endpoints in it.
    pub fn pending_within(&self, set: impl Fn(NodeId) -> bool) -> bool {
        self.queue.iter().any(|Reverse(q)| match &q.item {
            Item::Timer { node, .. } => set(*node),
            Item::Deliver(e) => set(e.sender) && set(e.receiver),
        })
    }
}

/// During `[start, end)` every good-sender message arrives within
/// `max_delay` ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilityWindow {
    pub start: Time,
    #[serde(default)]
    pub end: Option<Time>,
    pub max_delay: Time,
}

impl ReliabilityWindow {
    pub fn contains(&self, t: Time) -> bool {
        t >= self.start && self.end.map(|e| t < e).unwrap_or(true)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Any,
    Corrupted,
    Good,
    Shard(ShardId),
    Nodes(BTreeSet<NodeId>),
}

impl Selector {
    fn matches(&self, n: NodeId, corrupted: &dyn Fn(NodeId) -> bool) -> bool {
        match self {
            Selector::Any => true,
            Selector::Corrupted => corrupted(n),
            Selector::Good => !corrupted(n),
            Selector::Shard(s) => matches!(n, NodeId::Replica(r) if r.shard == *s),
            Selector::Nodes(set) => set.contains(&n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Drop,
    Delay(Time),
    /// Random extra delay in `0..=max`, which reorders traffic.
    Reorder(Time),
    /// Drop only for the listed receivers.
    WithholdFrom(BTreeSet<NodeId>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub from: Selector,
    pub to: Selector,
    /// Empty means every message type.
    #[serde(default)]
    pub msg_types: Vec<String>,
    /// Half-open tick range in which the rule is active; `None` is always.
    #[serde(default)]
    pub during: Option<(Time, Time)>,
    pub action: Action,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryScript {
    pub corrupted: BTreeMap<ShardId, BTreeSet<ReplicaId>>,
    #[serde(default)]
    pub rules: Vec<Rule>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("shard {shard} has {count} corrupted replicas but tolerates only {f}")]
    TooManyCorrupted { shard: ShardId, count: usize, f: u32 },
    #[error("{0} is not corrupted and cannot be impersonated")]
    Impersonation(NodeId),
}

impl AdversaryScript {
    pub fn is_corrupted(&self, n: NodeId) -> bool {
        match n {
            NodeId::Replica(r) => self.corrupted.get(&r.shard).map(|s| s.contains(&r)).unwrap_or(false),
            NodeId::Client(_) => false,
        }
    }

    /// Checks `|corrupted(S)| <= f(S)` for every shard.
    pub fn check_bounds(&self, f_of: impl Fn(ShardId) -> u32) -> Result<(), SimError> {
        for (s, set) in &self.corrupted {
            let f = f_of(*s);
            if set.len() > f as usize {
                return Err(SimError::TooManyCorrupted { shard: *s, count: set.len(), f });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Bound used inside reliability windows that do not set their own.
    pub delta: Time,
    /// Every in-window message takes exactly `max_delay`; used to measure
    /// phase counts.
    pub fixed_delay: bool,
    pub windows: Vec<ReliabilityWindow>,
    /// Outside windows: delay drawn from `1..=unreliable_max_delay`.
    pub unreliable_max_delay: Time,
    /// Outside windows: independent loss probability.
    pub unreliable_drop: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            delta: 10,
            fixed_delay: false,
            windows: vec![ReliabilityWindow { start: 0, end: None, max_delay: 10 }],
            unreliable_max_delay: 80,
            unreliable_drop: 0.2,
        }
    }
}

impl NetworkConfig {
    pub fn window_at(&self, t: Time) -> Option<&ReliabilityWindow> {
        self.windows.iter().find(|w| w.contains(t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLevel {
    /// Protocol events only.
    Events,
    /// Protocol events plus every delivery and drop.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub trace_version: u32,
    pub protocol: String,
    pub scenario: String,
    pub seed: u64,
}

/// One JSONL line. The first nine fields are always present (possibly
/// `null`); the rest only when they carry information.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: Time,
    pub sender: Option<String>,
    pub receiver: Option<String>,
    pub msg_type: Option<String>,
    pub round: Option<Round>,
    pub view: Option<View>,
    pub shard: Option<u32>,
    pub txn_id: Option<u64>,
    pub decision: Option<Decision>,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub protocol: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pledge_round: Option<Round>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub outcome_round: Option<Round>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub level: TraceLevel,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(header: TraceHeader, level: TraceLevel) -> Self {
        Trace { header, level, records: Vec::new() }
    }

    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<Trace, serde_json::Error> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header: TraceHeader = serde_json::from_str(lines.next().unwrap_or("{}"))?;
        let records = lines.map(serde_json::from_str).collect::<Result<Vec<TraceRecord>, _>>()?;
        Ok(Trace { header, level: TraceLevel::Full, records })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SendOutcome {
    Scheduled(Time),
    Dropped,
}

/// The fabric: clock, delay model, adversary script and trace.
pub struct Network<M: Payload> {
    pub cfg: NetworkConfig,
    pub script: AdversaryScript,
    pub clock: SimClock<M>,
    pub trace: Trace,
    pub stats: NetStats,
    rng: ChaCha8Rng,
}

impl<M: Payload> Network<M> {
    pub fn new(cfg: NetworkConfig, script: AdversaryScript, seed: u64, trace: Trace) -> Self {
        Network { cfg, script, clock: SimClock::default(), trace, stats: NetStats::default(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn now(&self) -> Time {
        self.clock.now
    }

    fn record(&mut self, kind: &str, env: &Envelope<M>, at: Time) {
        if self.trace.level != TraceLevel::Full {
            return;
        }
        let m = env.payload.meta();
        self.trace.push(TraceRecord {
            time: at,
            sender: Some(env.sender.to_string()),
            receiver: Some(env.receiver.to_string()),
            msg_type: Some(m.msg_type.to_string()),
            round: m.round,
            view: m.view,
            shard: m.shard.map(|s| s.0),
            txn_id: m.txn_id.map(|t| t.0),
            decision: m.decision,
            kind: kind.to_string(),
            ..Default::default()
        });
    }

    /// Schedules `env` according to the delay model and adversary rules.
    pub fn send(&mut self, mut env: Envelope<M>) -> SendOutcome {
        let now = self.clock.now;
        env.sent_at = now;
        env.authenticated = matches!(env.sender, NodeId::Replica(_));
        self.stats.sent += 1;
        let sender_bad = self.script.is_corrupted(env.sender);
        let window = self.cfg.window_at(now).copied();
        let mut delay = match window {
            Some(w) if self.cfg.fixed_delay => w.max_delay.max(1),
            Some(w) => self.rng.gen_range(1..=w.max_delay.max(1)),
            None => {
                if !sender_bad && self.rng.gen_bool(self.cfg.unreliable_drop.clamp(0.0, 1.0)) {
                    return self.drop_env(env);
                }
                self.rng.gen_range(1..=self.cfg.unreliable_max_delay.max(1))
            }
        };
        // Inside a window the adversary cannot touch good senders.
        let rules_apply = sender_bad || window.is_none();
        if rules_apply {
            let msg_type = env.payload.meta().msg_type;
            let script = &self.script;
            let corrupted = |n: NodeId| script.is_corrupted(n);
            let mut dropped = false;
            let mut extra = 0;
            let mut jitter = 0;
            for r in &script.rules {
                if let Some((a, b)) = r.during {
                    if now < a || now >= b {
                        continue;
                    }
                }
                if !r.msg_types.is_empty() && !r.msg_types.iter().any(|t| t == msg_type) {
                    continue;
                }
                if !r.from.matches(env.sender, &corrupted) || !r.to.matches(env.receiver, &corrupted) {
                    continue;
                }
                match &r.action {
                    Action::Drop => dropped = true,
                    Action::WithholdFrom(set) => dropped |= set.contains(&env.receiver),
                    Action::Delay(d) => extra += d,
                    Action::Reorder(j) => jitter = jitter.max(*j),
                }
            }
            if dropped {
                return self.drop_env(env);
            }
            if jitter > 0 {
                extra += self.rng.gen_range(0..=jitter);
            }
            delay += extra;
        }
        let at = now + delay;
        self.clock.push(at, Item::Deliver(env));
        SendOutcome::Scheduled(at)
    }

    fn drop_env(&mut self, env: Envelope<M>) -> SendOutcome {
        self.stats.dropped += 1;
        let now = self.clock.now;
        self.record("drop", &env, now);
        SendOutcome::Dropped
    }

    /// Sends a message on behalf of a corrupted replica. Impersonating a
    /// good replica is refused.
    pub fn inject(&mut self, env: Envelope<M>) -> Result<SendOutcome, SimError> {
        if !self.script.is_corrupted(env.sender) {
            return Err(SimError::Impersonation(env.sender));
        }
        Ok(self.send(env))
    }

    pub fn pending_within(&self, set: impl Fn(NodeId) -> bool) -> bool {
        self.clock.pending_within(set)
    }

    pub fn schedule_timer(&mut self, node: NodeId, after: Time, timer: u64) {
        let at = self.clock.now + after.max(1);
        self.clock.push(at, Item::Timer { node, timer });
    }

    /// Pops the earliest event, ties broken by sequence number.
    pub fn step(&mut self) -> SimEvent<M> {
        match self.clock.pop() {
            None => SimEvent::Quiescent,
            Some((at, Item::Deliver(env))) => {
                self.stats.delivered += 1;
                self.record("deliver", &env, at);
                SimEvent::Delivered(env)
            }
            Some((at, Item::Timer { node, timer })) => SimEvent::Timer { node, timer, at },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ClientId;
    use proptest::prelude::*;

    #[derive(Clone, Debug, PartialEq)]
    struct P(&'static str, u32);
    impl Payload for P {
        fn meta(&self) -> MsgMeta {
            MsgMeta { msg_type: self.0, ..Default::default() }
        }
    }

    fn r(s: u32, i: u32) -> NodeId {
        NodeId::Replica(ReplicaId::new(s, i))
    }

    fn env(from: NodeId, to: NodeId, p: P) -> Envelope<P> {
        Envelope { sender: from, receiver: to, payload: p, sent_at: 0, authenticated: false }
    }

    fn net(cfg: NetworkConfig, script: AdversaryScript, seed: u64) -> Network<P> {
        let h = TraceHeader { trace_version: TRACE_VERSION, protocol: "test".into(), scenario: "t".into(), seed };
        Network::new(cfg, script, seed, Trace::new(h, TraceLevel::Full))
    }

    #[test]
    fn empty_queue_is_quiescent() {
        let mut n = net(NetworkConfig::default(), AdversaryScript::default(), 1);
        assert!(matches!(n.step(), SimEvent::Quiescent));
    }

    #[test]
    fn equal_times_pop_in_send_order() {
        let cfg = NetworkConfig { fixed_delay: true, ..Default::default() };
        let mut n = net(cfg, AdversaryScript::default(), 1);
        n.send(env(r(0, 0), r(0, 1), P("A", 1)));
        n.send(env(r(0, 0), r(0, 1), P("A", 2)));
        let mut got = vec![];
        while let SimEvent::Delivered(e) = n.step() {
            got.push((e.sent_at, n.now(), e.payload.1));
        }
        assert_eq!(got, vec![(0, 10, 1), (0, 10, 2)]);
    }

    #[test]
    fn drop_rule_for_corrupted_sender() {
        let mut script = AdversaryScript::default();
        script.corrupted.insert(ShardId(0), [ReplicaId::new(0, 3)].into());
        script.rules.push(Rule {
            from: Selector::Nodes([r(0, 3)].into()),
            to: Selector::Nodes([r(0, 5)].into()),
            msg_types: vec!["Prepare".into()],
            during: None,
            action: Action::Drop,
        });
        let mut n = net(NetworkConfig::default(), script, 3);
        assert_eq!(n.send(env(r(0, 3), r(0, 5), P("Prepare", 0))), SendOutcome::Dropped);
        assert!(matches!(n.send(env(r(0, 3), r(0, 4), P("Prepare", 0))), SendOutcome::Scheduled(_)));
        assert!(matches!(n.send(env(r(0, 3), r(0, 5), P("Commit", 0))), SendOutcome::Scheduled(_)));
    }

    #[test]
    fn withhold_from_subset() {
        let mut script = AdversaryScript::default();
        script.corrupted.insert(ShardId(0), [ReplicaId::new(0, 0)].into());
        script.rules.push(Rule {
            from: Selector::Corrupted,
            to: Selector::Any,
            msg_types: vec![],
            during: None,
            action: Action::WithholdFrom([r(0, 1), r(0, 2)].into()),
        });
        let mut n = net(NetworkConfig::default(), script, 9);
        let delivered: Vec<u32> = (1..7)
            .filter(|i| matches!(n.send(env(r(0, 0), r(0, *i), P("PrePrepare", 0))), SendOutcome::Scheduled(_)))
            .collect();
        assert_eq!(delivered, vec![3, 4, 5, 6]);
    }

    #[test]
    fn rules_cannot_touch_good_senders_inside_window() {
        let mut script = AdversaryScript::default();
        script.rules.push(Rule { from: Selector::Any, to: Selector::Any, msg_types: vec![], during: None, action: Action::Drop });
        let mut n = net(NetworkConfig::default(), script, 4);
        assert!(matches!(n.send(env(r(0, 1), r(0, 2), P("X", 0))), SendOutcome::Scheduled(_)));
    }

    #[test]
    fn impersonation_refused() {
        let mut n = net(NetworkConfig::default(), AdversaryScript::default(), 4);
        assert_eq!(n.inject(env(r(0, 1), r(0, 2), P("X", 0))).unwrap_err(), SimError::Impersonation(r(0, 1)));
    }

    #[test]
    fn corruption_bound() {
        let mut s = AdversaryScript::default();
        s.corrupted.insert(ShardId(1), [ReplicaId::new(1, 0), ReplicaId::new(1, 1), ReplicaId::new(1, 2)].into());
        assert!(s.check_bounds(|_| 2).is_err());
        assert!(s.check_bounds(|_| 3).is_ok());
    }

    #[test]
    fn trace_roundtrips_through_jsonl() {
        let mut n = net(NetworkConfig::default(), AdversaryScript::default(), 5);
        n.send(env(r(0, 1), NodeId::Client(ClientId(3)), P("Inform", 0)));
        while !matches!(n.step(), SimEvent::Quiescent) {}
        let text = n.trace.to_jsonl();
        let back = Trace::from_jsonl(&text).unwrap();
        assert_eq!(back.records, n.trace.records);
        assert!(text.lines().next().unwrap().contains("\"trace_version\":1"));
        assert!(text.lines().nth(1).unwrap().contains("\"receiver\":\"c3\""));
    }

    fn run_random(seed: u64, sends: &[(u32, u32, Time)]) -> (String, Vec<(Time, Time)>) {
        let cfg = NetworkConfig {
            windows: vec![ReliabilityWindow { start: 100, end: None, max_delay: 10 }],
            ..Default::default()
        };
        let mut n = net(cfg, AdversaryScript::default(), seed);
        let mut lat = vec![];
        // Sends are issued at their scheduled time via timers.
        for (i, (_, _, at)) in sends.iter().enumerate() {
            n.clock.push(*at, Item::Timer { node: r(0, 0), timer: i as u64 });
        }
        loop {
            match n.step() {
                SimEvent::Quiescent => break,
                SimEvent::Timer { timer, .. } => {
                    let (a, b, _) = sends[timer as usize];
                    n.send(env(r(0, a), r(0, b), P("M", timer as u32)));
                }
                SimEvent::Delivered(e) => lat.push((e.sent_at, n.now())),
            }
        }
        (n.trace.to_jsonl(), lat)
    }

    proptest! {
        #[test]
        fn identical_inputs_identical_trace(seed in 0u64..1000, sends in proptest::collection::vec((0u32..4, 0u32..4, 0u64..300), 0..40)) {
            let (a, _) = run_random(seed, &sends);
            let (b, _) = run_random(seed, &sends);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn in_window_delivery_within_bound(seed in 0u64..1000, sends in proptest::collection::vec((0u32..4, 0u32..4, 0u64..300), 1..40)) {
            let (_, lat) = run_random(seed, &sends);
            for (sent, got) in lat {
                prop_assert!(got > sent);
                if sent >= 100 {
                    prop_assert!(got - sent <= 10);
                }
            }
        }
    }
}
