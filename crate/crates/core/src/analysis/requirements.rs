//! Trace checkers for the safety and liveness requirements, plus the
//! protocol-specific invariants.

use crate::analysis::serial::check_serializable;
use crate::ids::{ClientId, Decision, Protocol, ReplicaId, Round, ShardId, TxnId, View};
use crate::object_model::{local_inputs, validate, ObjectId, ObjectStatus};
use crate::protocol::{Event, RunResult, SlotKind};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Transactions the liveness checks are required to cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LivenessScope {
    /// Every processed transaction is decided; every valid request of a
    /// well-behaved client is processed and confirmed.
    Everything,
    /// Only transactions of well-behaved clients whose inputs are all owned
    /// by well-behaved owners.
    HonestClients,
    /// Liveness is not claimed for this run.
    Skip,
}

/// Minimum length of the final reliable period for liveness to be checked.
pub const MIN_FINAL_WINDOW: u64 = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Check {
    R1Validity,
    R2Involvement,
    R3Applicability,
    R4Uniform,
    R5Service,
    R6Confirmation,
    SlotAgreement,
    Serializable,
    GlobalCommitAgreement,
    AbortConservation,
}

impl Check {
    pub fn label(self) -> &'static str {
        match self {
            Check::R1Validity => "R1 validity",
            Check::R2Involvement => "R2 involvement",
            Check::R3Applicability => "R3 applicability",
            Check::R4Uniform => "R4 uniform decisions",
            Check::R5Service => "R5 service",
            Check::R6Confirmation => "R6 confirmation",
            Check::SlotAgreement => "slot agreement",
            Check::Serializable => "serializability",
            Check::GlobalCommitAgreement => "global commit agreement",
            Check::AbortConservation => "abort conservation",
        }
    }

    pub fn is_liveness(self) -> bool {
        matches!(self, Check::R5Service | Check::R6Confirmation)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Status {
    Pass,
    Fail(Vec<String>),
    /// Not applicable to this run, with the reason.
    Skipped(String),
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RequirementReport {
    pub checks: BTreeMap<Check, Status>,
}

impl RequirementReport {
    pub fn ok(&self) -> bool {
        self.checks.values().all(|s| !matches!(s, Status::Fail(_)))
    }

    pub fn safety_ok(&self) -> bool {
        self.checks.iter().all(|(c, s)| c.is_liveness() || !matches!(s, Status::Fail(_)))
    }

    pub fn failures(&self) -> Vec<(Check, &[String])> {
        self.checks
            .iter()
            .filter_map(|(c, s)| match s {
                Status::Fail(w) => Some((*c, w.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn status(&self, c: Check) -> &Status {
        &self.checks[&c]
    }

    fn put(&mut self, c: Check, witnesses: Vec<String>) {
        let s = if witnesses.is_empty() { Status::Pass } else { Status::Fail(witnesses) };
        self.checks.insert(c, s);
    }
}

impl fmt::Display for RequirementReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (c, s) in &self.checks {
            match s {
                Status::Pass => writeln!(f, "{:<24} pass", c.label())?,
                Status::Skipped(why) => writeln!(f, "{:<24} skipped ({why})", c.label())?,
                Status::Fail(w) => {
                    writeln!(f, "{:<24} FAIL", c.label())?;
                    for x in w.iter().take(10) {
                        writeln!(f, "    {x}")?;
                    }
                    if w.len() > 10 {
                        writeln!(f, "    ... {} more", w.len() - 10)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Indexed view of the good replicas' events.
struct Facts<'a> {
    res: &'a RunResult,
    /// (replica, txn) -> decisions with event index.
    decided: BTreeMap<(ReplicaId, TxnId), Vec<(usize, Decision)>>,
    accepted: Vec<(usize, ReplicaId, TxnId, Round, SlotKind)>,
    consumed: BTreeMap<(ReplicaId, TxnId), BTreeSet<ObjectId>>,
    restored: BTreeMap<(ReplicaId, TxnId), BTreeSet<ObjectId>>,
}

impl<'a> Facts<'a> {
    fn new(res: &'a RunResult) -> Self {
        let mut f = Facts {
            res,
            decided: BTreeMap::new(),
            accepted: Vec::new(),
            consumed: BTreeMap::new(),
            restored: BTreeMap::new(),
        };
        for (i, e) in res.events.iter().enumerate() {
            let Some(r) = e.replica() else { continue };
            if !res.is_good(r) {
                continue;
            }
            match e {
                Event::Decided { txn, decision, .. } => f.decided.entry((r, *txn)).or_default().push((i, *decision)),
                Event::Accepted { txn, round, kind, .. } => f.accepted.push((i, r, *txn, *round, *kind)),
                Event::Applied { txn, consumed, .. } => {
                    f.consumed.entry((r, *txn)).or_default().extend(consumed.iter().copied())
                }
                Event::RolledBack { txn, restored, .. } => {
                    f.restored.entry((r, *txn)).or_default().extend(restored.iter().copied())
                }
                _ => {}
            }
        }
        f
    }

    fn good_replicas(&self, s: ShardId) -> impl Iterator<Item = ReplicaId> + '_ {
        self.res.topo.shards[&s].replicas.iter().copied().filter(|r| self.res.is_good(*r))
    }

    fn decision(&self, r: ReplicaId, t: TxnId) -> Option<Decision> {
        self.decided.get(&(r, t)).and_then(|v| v.first()).map(|(_, d)| *d)
    }
}

/// Runs every checker. `scope` selects which transactions liveness covers.
pub fn check_requirements(res: &RunResult, scope: LivenessScope) -> RequirementReport {
    let facts = Facts::new(res);
    let mut rep = RequirementReport::default();
    rep.put(Check::R1Validity, r1(&facts));
    rep.put(Check::R2Involvement, r2(&facts));
    rep.put(Check::R3Applicability, r3(&facts));
    rep.put(Check::R4Uniform, r4(&facts));
    rep.put(Check::SlotAgreement, slot_agreement(&facts));
    rep.put(
        Check::Serializable,
        match check_serializable(res) {
            Ok(_) => vec![],
            Err(e) => vec![e.to_string()],
        },
    );
    if res.protocol == Protocol::Ocb {
        rep.put(Check::GlobalCommitAgreement, global_commit_agreement(res));
    } else {
        rep.checks.insert(Check::GlobalCommitAgreement, Status::Skipped("optimistic protocol only".into()));
    }
    rep.put(Check::AbortConservation, abort_conservation(&facts));

    match liveness_applies(res, scope) {
        Err(why) => {
            rep.checks.insert(Check::R5Service, Status::Skipped(why.clone()));
            rep.checks.insert(Check::R6Confirmation, Status::Skipped(why));
        }
        Ok(()) => {
            let due = due_txns(&facts, scope);
            let (r5, r6) = service(&facts, &due);
            rep.put(Check::R5Service, r5);
            rep.put(Check::R6Confirmation, r6);
        }
    }
    rep
}

fn liveness_applies(res: &RunResult, scope: LivenessScope) -> Result<(), String> {
    if scope == LivenessScope::Skip {
        return Err("not claimed for this run".into());
    }
    match res.final_window {
        Some(w) if w.end.is_none() => Ok(()),
        Some(w) if w.end.unwrap() - w.start >= MIN_FINAL_WINDOW && w.end.unwrap() >= res.end_time => Ok(()),
        _ => Err("run does not end in a reliability window".into()),
    }
}

fn r1(f: &Facts) -> Vec<String> {
    let mut w = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, r, t, _, _) in &f.accepted {
        if !seen.insert(*t) {
            continue;
        }
        let Some(txn) = f.res.catalog.get(t) else {
            w.push(format!("event {i}: {r} processed unknown {t}"));
            continue;
        };
        if !validate(txn, &f.res.topo.directory, &f.res.topo.keyring).is_valid() {
            w.push(format!("event {i}: {r} processed {t} without well-behaved owner support"));
        }
    }
    w
}

fn r2(f: &Facts) -> Vec<String> {
    let mut w = Vec::new();
    for (i, e) in f.res.events.iter().enumerate() {
        let Some(r) = e.replica() else { continue };
        if !f.res.is_good(r) {
            continue;
        }
        let t = match e {
            Event::Accepted { txn, .. } | Event::Pledged { txn, .. } | Event::Decided { txn, .. } | Event::Applied { txn, .. } => {
                *txn
            }
            _ => continue,
        };
        match f.res.catalog.get(&t) {
            Some(txn) if f.res.topo.shards_of(txn).contains(&r.shard) => {}
            _ => w.push(format!("event {i}: {r} acted on {t} outside its shards")),
        }
    }
    w
}

/// Committed transactions consume exactly their live local inputs, each
/// object at most once, and only objects that exist.
fn r3(f: &Facts) -> Vec<String> {
    let res = f.res;
    let mut w = Vec::new();
    let assign = &res.topo.assign;
    let committed = res.committed();
    let mut consumers: BTreeMap<ObjectId, BTreeSet<TxnId>> = BTreeMap::new();
    for t in &committed {
        let Some(txn) = res.catalog.get(t) else { continue };
        for o in &txn.inputs {
            consumers.entry(*o).or_default().insert(*t);
            let exists = if o.is_genesis() {
                res.topo.genesis.get(&assign.placement(*o)).map(|l| l.contains_key(o)).unwrap_or(false)
            } else {
                committed.contains(&o.txn) && res.catalog.get(&o.txn).map(|p| p.outputs.iter().any(|(x, _)| x == o)).unwrap_or(false)
            };
            if !exists {
                w.push(format!("{t} committed consuming {o}, which was never constructed"));
            }
        }
        for s in res.topo.shards_of(txn) {
            let mine: BTreeSet<ObjectId> = txn.inputs.iter().copied().filter(|o| assign.placement(*o) == s).collect();
            for r in f.good_replicas(s) {
                // Unexecuted commits are a liveness matter.
                let Some(got) = f.consumed.get(&(r, *t)).cloned() else { continue };
                if f.decision(r, *t) != Some(Decision::Commit) {
                    continue;
                }
                if got != mine {
                    w.push(format!("{r} committed {t} consuming {got:?}, expected {mine:?}"));
                }
            }
        }
    }
    for (o, ts) in consumers {
        if ts.len() > 1 {
            w.push(format!("{o} consumed by several committed transactions {ts:?}"));
        }
    }
    w
}

fn r4(f: &Facts) -> Vec<String> {
    let mut w = Vec::new();
    let mut per_txn: BTreeMap<TxnId, BTreeMap<Decision, Vec<ReplicaId>>> = BTreeMap::new();
    for ((r, t), ds) in &f.decided {
        if ds.len() > 1 {
            w.push(format!("{r} decided {t} {} times (event {})", ds.len(), ds[1].0));
        }
        for (_, d) in ds {
            per_txn.entry(*t).or_default().entry(*d).or_default().push(*r);
        }
    }
    for (t, m) in per_txn {
        if m.len() > 1 {
            let c = &m[&Decision::Commit];
            let a = &m[&Decision::Abort];
            w.push(format!("{t}: commit at {} and abort at {}", c[0], a[0]));
        }
    }
    w
}

/// Good replicas of a shard accept the same transaction in the same slot.
fn slot_agreement(f: &Facts) -> Vec<String> {
    let mut w = Vec::new();
    let mut slots: BTreeMap<(ShardId, Round, SlotKind), (TxnId, ReplicaId)> = BTreeMap::new();
    let mut per_replica: BTreeMap<(ReplicaId, TxnId, SlotKind), Round> = BTreeMap::new();
    for (i, r, t, round, kind) in &f.accepted {
        // Pessimistic outcome steps share the round space with inputs steps.
        let k = if f.res.protocol == Protocol::Pcb { SlotKind::Inputs } else { *kind };
        match slots.get(&(r.shard, *round, k)) {
            Some((t0, r0)) if t0 != t => {
                w.push(format!("event {i}: {r} accepted {t} in round {round}, {r0} accepted {t0}"))
            }
            Some(_) => {}
            None => {
                slots.insert((r.shard, *round, k), (*t, *r));
            }
        }
        if let Some(prev) = per_replica.insert((*r, *t, *kind), *round) {
            if prev != *round {
                w.push(format!("event {i}: {r} accepted {t} in rounds {prev} and {round}"));
            }
        }
    }
    w
}

/// No two good replicas reach the global commit phase for different
/// certificates that share a slot.
fn global_commit_agreement(res: &RunResult) -> Vec<String> {
    let mut w = Vec::new();
    let mut by_slot: BTreeMap<(ShardId, View, Round), ([u8; 32], TxnId, ReplicaId)> = BTreeMap::new();
    for (i, e) in res.events.iter().enumerate() {
        let Event::GlobalCommitPhase { replica, txn, digest, slots, .. } = e else { continue };
        if !res.is_good(*replica) {
            continue;
        }
        for s in slots {
            match by_slot.get(s) {
                Some((d, t0, r0)) if d != digest => w.push(format!(
                    "event {i}: {replica} commit phase for {txn} in slot {:?}, {r0} for {t0}",
                    (s.0 .0, s.1, s.2)
                )),
                Some(_) => {}
                None => {
                    by_slot.insert(*s, (*digest, *txn, *replica));
                }
            }
        }
    }
    w
}

/// An object leaves a good replica's ledger only through a committed
/// transaction; aborts give everything back.
fn abort_conservation(f: &Facts) -> Vec<String> {
    let res = f.res;
    let mut w = Vec::new();
    for (r, ledger) in &res.ledgers {
        if !res.is_good(*r) {
            continue;
        }
        for (o, rec) in ledger {
            if rec.status != ObjectStatus::Destructed {
                continue;
            }
            let takers: Vec<TxnId> =
                f.consumed.iter().filter(|((rr, _), set)| rr == r && set.contains(o)).map(|((_, t), _)| *t).collect();
            let justified = takers.iter().any(|t| f.decision(*r, *t) == Some(Decision::Commit));
            let in_flight = takers.iter().any(|t| f.decision(*r, *t).is_none());
            if !justified && !in_flight {
                w.push(format!("{r}: {o} destroyed but every consumer {takers:?} aborted"));
            }
        }
    }
    if res.protocol == Protocol::Pcb {
        for ((r, t), _) in f.decided.iter().filter(|(_, v)| v.first().map(|x| x.1) == Some(Decision::Abort)) {
            let taken = f.consumed.get(&(*r, *t)).cloned().unwrap_or_default();
            let back = f.restored.get(&(*r, *t)).cloned().unwrap_or_default();
            if taken != back {
                w.push(format!("{r}: abort of {t} destroyed {taken:?} but restored {back:?}"));
            }
        }
    }
    w
}

/// Transactions liveness must cover, with the shards that must decide.
fn due_txns(f: &Facts, scope: LivenessScope) -> BTreeSet<TxnId> {
    let res = f.res;
    let dir = &res.topo.directory;
    let honest = |t: TxnId| {
        let Some(txn) = res.catalog.get(&t) else { return false };
        dir.is_well_behaved(txn.client)
            && txn.inputs.iter().all(|o| dir.owner(o).map(|c| dir.is_well_behaved(c)).unwrap_or(false))
            && validate(txn, dir, &res.topo.keyring).fully_supported()
            && txn.check_well_formed().is_ok()
    };
    let mut due: BTreeSet<TxnId> = res.catalog.keys().copied().filter(|t| honest(*t)).collect();
    if scope == LivenessScope::Everything {
        due.extend(f.accepted.iter().map(|a| a.2));
    }
    due
}

fn service(f: &Facts, due: &BTreeSet<TxnId>) -> (Vec<String>, Vec<String>) {
    let res = f.res;
    let mut r5 = Vec::new();
    let mut r6 = Vec::new();
    if !res.quiescent {
        r5.push(format!("still active at t={}", res.end_time));
    }
    let mut confirmed: BTreeMap<(TxnId, ShardId), Decision> = BTreeMap::new();
    for e in &res.events {
        if let Event::ClientConfirmed { txn, shard, decision, .. } = e {
            confirmed.entry((*txn, *shard)).or_insert(*decision);
        }
    }
    for t in due {
        let txn = &res.catalog[t];
        let mut decisions = BTreeSet::new();
        for s in res.topo.shards_of(txn) {
            for r in f.good_replicas(s) {
                match f.decision(r, *t) {
                    Some(d) => {
                        decisions.insert(d);
                    }
                    None => r5.push(format!("{r} never decided {t}")),
                }
            }
        }
        let client: ClientId = txn.client;
        if !res.topo.directory.is_well_behaved(client) {
            continue;
        }
        for s in res.topo.shards_of(txn) {
            match confirmed.get(&(*t, s)) {
                None => r6.push(format!("{client} holds no confirmation of {t} from {s}")),
                Some(d) if decisions.len() == 1 && !decisions.contains(d) => {
                    r6.push(format!("{client} confirmed {d} for {t} from {s}, replicas decided otherwise"))
                }
                Some(_) => {}
            }
        }
    }
    (r5, r6)
}

/// Per-replica view of inputs of `txn` at the end of the run, for reports.
pub fn input_status(res: &RunResult, r: ReplicaId, txn: TxnId) -> BTreeMap<ObjectId, Option<ObjectStatus>> {
    let Some(t) = res.catalog.get(&txn) else { return BTreeMap::new() };
    let Some(l) = res.ledgers.get(&r) else { return BTreeMap::new() };
    match local_inputs(t, r.shard, &res.topo.assign, l) {
        Ok((i, _)) => i.into_iter().map(|o| (o, l.get(&o).map(|x| x.status))).collect(),
        Err(_) => BTreeMap::new(),
    }
}
