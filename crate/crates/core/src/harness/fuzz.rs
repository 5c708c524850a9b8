//! Randomized scenarios and the invariant suite run over them.

use crate::analysis::{check_requirements, check_serializable, LivenessScope, RequirementReport};
use crate::harness::scenario::{
    AdversarySpec, ClientSpec, ObjectSpec, RuleSpec, Scenario, ScenarioFile, SelectorSpec, TopologySpec, TxnSpec,
};
use crate::ids::{Decision, Protocol, ReplicaId, ShardId, TxnId};
use crate::protocol::{run, ByzConfig, Event, RunResult, Timing};
use crate::sim::{NetworkConfig, ReliabilityWindow, TraceLevel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FuzzMode {
    /// Malicious clients, corrupted replicas, unreliable periods.
    Adversarial,
    /// Well-behaved clients; replicas and network as in `Adversarial`.
    Honest,
    /// Well-behaved clients and replicas, reliable network, spaced arrivals.
    Optimistic,
    /// A corrupted primary and its helpers starve good replicas of global
    /// phase messages for one transaction.
    Attack,
}

#[derive(Clone, Debug, Serialize)]
pub struct FuzzConfig {
    pub protocol: Protocol,
    pub mode: FuzzMode,
    pub shards: u32,
    pub n: u32,
    pub f: u32,
    pub max_txns: usize,
}

impl FuzzConfig {
    pub fn new(protocol: Protocol, mode: FuzzMode) -> Self {
        FuzzConfig { protocol, mode, shards: 4, n: 7, f: 2, max_txns: 50 }
    }
}

/// Liveness coverage claimed for a protocol under a fuzz mode.
pub fn scope_for(protocol: Protocol, mode: FuzzMode) -> LivenessScope {
    match (protocol, mode) {
        (Protocol::Pcb, _) => LivenessScope::Everything,
        (Protocol::Ccb, _) => LivenessScope::HonestClients,
        (Protocol::Ocb, FuzzMode::Optimistic) => LivenessScope::HonestClients,
        (Protocol::Ocb, _) => LivenessScope::Skip,
    }
}

fn node(r: ReplicaId) -> String {
    format!("r{}.{}", r.shard.0, r.idx)
}

/// Builds the random scenario for `seed`.
pub fn generate(cfg: &FuzzConfig, seed: u64) -> ScenarioFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ cfg.protocol as u64);
    if cfg.mode == FuzzMode::Attack {
        return generate_attack(cfg, seed, &mut rng);
    }
    let adversarial = cfg.mode == FuzzMode::Adversarial;
    let optimistic = cfg.mode == FuzzMode::Optimistic;

    let num_clients = 6u32;
    let mut clients: Vec<ClientSpec> = (1..=num_clients).map(|id| ClientSpec { id, malicious: false }).collect();
    if adversarial {
        for c in clients.iter_mut().skip(1) {
            c.malicious = rng.gen_bool(0.3);
        }
    }
    let malicious: BTreeSet<u32> = clients.iter().filter(|c| c.malicious).map(|c| c.id).collect();

    let num_objects = rng.gen_range(12..=28);
    let objects: Vec<ObjectSpec> = (0..num_objects)
        .map(|i| ObjectSpec { name: format!("g{i}"), shard: rng.gen_range(0..cfg.shards), owner: rng.gen_range(1..=num_clients) })
        .collect();
    // (reference, owner) of every object that may exist.
    let mut pool: Vec<(String, u32)> = objects.iter().map(|o| (o.name.clone(), o.owner)).collect();
    let mut claimed: BTreeSet<String> = BTreeSet::new();

    let num_txns = rng.gen_range(1..=cfg.max_txns);
    let mut txns = Vec::new();
    let mut at = rng.gen_range(1..30);
    for id in 1..=num_txns as u64 {
        at += if optimistic { rng.gen_range(150..250) } else { rng.gen_range(0..40) };
        let client = rng.gen_range(1..=num_clients);
        let bad = malicious.contains(&client);
        let want = rng.gen_range(1..=3usize);
        let mut inputs = Vec::new();
        let mut forge = Vec::new();
        if bad {
            for _ in 0..want {
                let (name, owner) = pool.choose(&mut rng).unwrap().clone();
                if inputs.contains(&name) {
                    continue;
                }
                if !malicious.contains(&owner) && rng.gen_bool(0.7) {
                    continue;
                }
                if !malicious.contains(&owner) {
                    forge.push(name.clone());
                }
                inputs.push(name);
            }
        } else {
            let mut mine: Vec<&(String, u32)> =
                pool.iter().filter(|(n, o)| !claimed.contains(n) && !malicious.contains(o)).collect();
            mine.shuffle(&mut rng);
            for (name, _) in mine.into_iter().take(want) {
                inputs.push(name.clone());
            }
            for n in &inputs {
                claimed.insert(n.clone());
            }
        }
        if inputs.is_empty() {
            continue;
        }
        let outs = rng.gen_range(1..=2);
        let outputs: Vec<u32> = (0..outs).map(|_| rng.gen_range(1..=num_clients)).collect();
        let output_shards = if rng.gen_bool(0.5) { outputs.iter().map(|_| rng.gen_range(0..cfg.shards)).collect() } else { vec![] };
        for (i, o) in outputs.iter().enumerate() {
            pool.push((format!("t{id}.{i}"), *o));
        }
        let targets = if bad && rng.gen_bool(0.5) {
            let k = rng.gen_range(1..=cfg.shards);
            let mut all: Vec<u32> = (0..cfg.shards).collect();
            all.shuffle(&mut rng);
            Some(all.into_iter().take(k as usize).collect())
        } else {
            None
        };
        let omit = if bad && rng.gen_bool(0.05) { vec![inputs[0].clone()] } else { vec![] };
        txns.push(TxnSpec { id, client, inputs, outputs, output_shards, at, targets, forge, omit });
    }
    let last = at;

    let mut network = NetworkConfig::default();
    if !optimistic && rng.gen_bool(0.6) {
        let a = rng.gen_range(0..=last.max(1));
        let b = a + rng.gen_range(100..1500);
        network.windows = vec![
            ReliabilityWindow { start: 0, end: Some(a), max_delay: 10 },
            ReliabilityWindow { start: b, end: None, max_delay: 10 },
        ];
        network.unreliable_drop = rng.gen_range(0.05..0.3);
        network.unreliable_max_delay = rng.gen_range(20..120);
    }

    let mut adversary = AdversarySpec::default();
    let mut byzantine = ByzConfig::default();
    if !optimistic {
        for s in 0..cfg.shards {
            let k = rng.gen_range(0..=cfg.f);
            let mut idx: Vec<u32> = (0..cfg.n).collect();
            idx.shuffle(&mut rng);
            for i in idx.into_iter().take(k as usize) {
                adversary.corrupted.push(format!("{s}:{i}"));
            }
        }
        if !adversary.corrupted.is_empty() {
            let kinds = ["drop", "delay 15", "reorder 30"];
            for _ in 0..rng.gen_range(0..=3) {
                let types: &[&str] = &["PrePrepare", "Prepare", "Commit", "ClusterSend", "ViewChange", "GPrepare", "GCommit", "Inform"];
                let msg_types = if rng.gen_bool(0.5) { vec![] } else { vec![types.choose(&mut rng).unwrap().to_string()] };
                let during = if rng.gen_bool(0.5) {
                    let s = rng.gen_range(0..=last);
                    Some([s, s + rng.gen_range(50..800)])
                } else {
                    None
                };
                adversary.rules.push(RuleSpec {
                    from: SelectorSpec::One("corrupted".into()),
                    to: SelectorSpec::One("any".into()),
                    msg_types,
                    during,
                    action: kinds.choose(&mut rng).unwrap().to_string(),
                    withhold_from: vec![],
                });
            }
            byzantine = ByzConfig {
                equivocate: rng.gen_bool(0.3),
                forge_pledge: rng.gen_bool(0.2),
                fake_inform: rng.gen_bool(0.3),
            };
        }
    }

    ScenarioFile {
        name: format!("fuzz_{}_{:?}_{seed}", cfg.protocol, cfg.mode).to_lowercase(),
        protocol: cfg.protocol,
        seed,
        max_time: last + 60_000,
        trace: Some(TraceLevel::Events),
        topology: TopologySpec { shards: cfg.shards, n: cfg.n, f: cfg.f, window: 16, ocb_max_attempts: 2, key_seed: None },
        network,
        timing: Timing::default(),
        clients,
        objects,
        txns,
        adversary,
        byzantine,
    }
}

/// One multi-shard transaction attacked in every global phase by corrupted
/// replicas of its shards, followed by a few ordinary transactions.
fn generate_attack(cfg: &FuzzConfig, seed: u64, rng: &mut ChaCha8Rng) -> ScenarioFile {
    let k = rng.gen_range(2..=cfg.shards.min(3));
    let mut shards: Vec<u32> = (0..cfg.shards).collect();
    shards.shuffle(rng);
    let involved: Vec<u32> = shards.into_iter().take(k as usize).collect();
    let attacker = involved[0];
    let clients = vec![ClientSpec { id: 1, malicious: false }, ClientSpec { id: 2, malicious: false }];
    let mut objects = Vec::new();
    for s in 0..cfg.shards {
        for j in 0..3 {
            objects.push(ObjectSpec { name: format!("s{s}o{j}"), shard: s, owner: 1 });
        }
    }
    let mut txns = vec![TxnSpec {
        id: 1,
        client: 1,
        inputs: involved.iter().map(|s| format!("s{s}o0")).collect(),
        outputs: vec![2],
        output_shards: vec![involved[1]],
        at: 10,
        targets: None,
        forge: vec![],
        omit: vec![],
    }];
    let mut at = 10;
    for id in 2..=rng.gen_range(2..=3u64) {
        at += rng.gen_range(600..900);
        let a = rng.gen_range(0..cfg.shards);
        let b = rng.gen_range(0..cfg.shards);
        let j = id - 1;
        let mut inputs = vec![format!("s{a}o{j}")];
        if b != a {
            inputs.push(format!("s{b}o{j}"));
        }
        txns.push(TxnSpec {
            id,
            client: 1,
            inputs,
            outputs: vec![1],
            output_shards: vec![],
            at,
            targets: None,
            forge: vec![],
            omit: vec![],
        });
    }

    let mut corrupted: BTreeSet<ReplicaId> = BTreeSet::new();
    corrupted.insert(ReplicaId::new(attacker, 0));
    for s in &involved {
        let mut idx: Vec<u32> = (1..cfg.n).collect();
        idx.shuffle(rng);
        let extra = if *s == attacker { cfg.f - 1 } else { cfg.f };
        for i in idx.into_iter().take(extra as usize) {
            corrupted.insert(ReplicaId::new(*s, i));
        }
    }
    let good: Vec<ReplicaId> = involved
        .iter()
        .flat_map(|s| (0..cfg.n).map(move |i| ReplicaId::new(*s, i)))
        .filter(|r| !corrupted.contains(r))
        .collect();
    let until = rng.gen_range(150..500);
    let pick = |rng: &mut ChaCha8Rng, max: usize| -> Vec<String> {
        let mut g = good.clone();
        g.shuffle(rng);
        let k = rng.gen_range(0..=max);
        g.into_iter().take(k).map(node).collect()
    };
    let mut rules = Vec::new();
    let attacker_nodes: Vec<String> = corrupted.iter().filter(|r| r.shard.0 == attacker).map(|r| node(*r)).collect();
    let all_corrupted = SelectorSpec::One("corrupted".into());
    let skipped_pp = pick(rng, cfg.f as usize * involved.len());
    if !skipped_pp.is_empty() {
        rules.push(RuleSpec {
            from: SelectorSpec::Nodes(vec![node(ReplicaId::new(attacker, 0))]),
            to: SelectorSpec::One("any".into()),
            msg_types: vec!["GPrePrepare".into()],
            during: Some([0, until]),
            action: "withhold".into(),
            withhold_from: skipped_pp,
        });
    }
    for (ty, max) in [("GPrepare", 3usize), ("GCommit", good.len())] {
        let w = pick(rng, max);
        if w.is_empty() {
            continue;
        }
        let from = if rng.gen_bool(0.5) { SelectorSpec::Nodes(attacker_nodes.clone()) } else { all_corrupted.clone() };
        rules.push(RuleSpec {
            from,
            to: SelectorSpec::One("any".into()),
            msg_types: vec![ty.into()],
            during: Some([0, until]),
            action: "withhold".into(),
            withhold_from: w,
        });
    }

    ScenarioFile {
        name: format!("fuzz_{}_attack_{seed}", cfg.protocol),
        protocol: cfg.protocol,
        seed,
        max_time: at + 60_000,
        trace: Some(TraceLevel::Events),
        topology: TopologySpec { shards: cfg.shards, n: cfg.n, f: cfg.f, window: 16, ocb_max_attempts: 3, key_seed: None },
        network: NetworkConfig::default(),
        timing: Timing::default(),
        clients,
        objects,
        txns,
        adversary: AdversarySpec { corrupted: corrupted.iter().map(|r| format!("{}:{}", r.shard.0, r.idx)).collect(), rules },
        byzantine: ByzConfig::default(),
    }
}

/// Outcome of the global-commit recovery property for one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Recovery {
    /// Fewer than `nf - f` good replicas of any shard reached the global
    /// commit phase, so the property says nothing.
    NotTriggered,
    Held,
    Violated(String),
}

/// If `nf - f` good replicas of one shard reached the global commit phase
/// for `txn`, every good replica of every involved shard must execute it
/// with the same decision.
pub fn check_recovery(res: &RunResult, txn: TxnId) -> Recovery {
    let Some(t) = res.catalog.get(&txn) else { return Recovery::NotTriggered };
    let shards = res.topo.shards_of(t);
    let mut reached: BTreeMap<ShardId, BTreeSet<u32>> = BTreeMap::new();
    let mut digests = BTreeSet::new();
    for e in &res.events {
        if let Event::GlobalCommitPhase { replica, txn: x, digest, .. } = e {
            if *x == txn && res.is_good(*replica) {
                reached.entry(replica.shard).or_default().insert(replica.idx);
                digests.insert(*digest);
            }
        }
    }
    let triggered = shards.iter().any(|s| {
        let q = res.topo.shard(*s).client_quorum() as usize;
        reached.get(s).map(|v| v.len() >= q).unwrap_or(false)
    });
    if !triggered {
        return Recovery::NotTriggered;
    }
    if digests.len() > 1 {
        return Recovery::Violated(format!("{} distinct certificates reached the commit phase", digests.len()));
    }
    let decisions = res.decisions(txn);
    let mut seen: BTreeSet<Decision> = BTreeSet::new();
    for s in &shards {
        for r in &res.topo.shard(*s).replicas {
            if !res.is_good(*r) {
                continue;
            }
            let d = res.events.iter().find_map(|e| match e {
                Event::Decided { replica, txn: x, decision, .. } if replica == r && *x == txn => Some(*decision),
                _ => None,
            });
            match d {
                Some(d) => {
                    seen.insert(d);
                }
                None => return Recovery::Violated(format!("{r} never executed {txn} ({decisions:?})")),
            }
        }
    }
    if seen.len() > 1 {
        return Recovery::Violated(format!("divergent decisions {seen:?}"));
    }
    Recovery::Held
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub txns: usize,
    pub committed: usize,
    pub quiescent: bool,
    pub end_time: u64,
    #[serde(skip)]
    pub report: RequirementReport,
    pub failures: Vec<String>,
    pub recovery: Option<Recovery>,
}

impl SeedOutcome {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run_seed(cfg: &FuzzConfig, seed: u64) -> SeedOutcome {
    let file = generate(cfg, seed);
    let sc = Scenario::from_file(file).expect("generated scenarios validate");
    let res = run(sc.config);
    let report = check_requirements(&res, scope_for(cfg.protocol, cfg.mode));
    let mut failures: Vec<String> =
        report.failures().into_iter().flat_map(|(c, w)| w.iter().take(3).map(move |x| format!("{}: {x}", c.label()))).collect();
    let recovery = if cfg.mode == FuzzMode::Attack && cfg.protocol == Protocol::Ocb {
        let r = check_recovery(&res, TxnId(1));
        if let Recovery::Violated(why) = &r {
            failures.push(format!("recovery: {why}"));
        }
        Some(r)
    } else {
        None
    };
    debug_assert!(check_serializable(&res).is_ok() || !failures.is_empty());
    SeedOutcome {
        seed,
        txns: res.catalog.len(),
        committed: res.committed().len(),
        quiescent: res.quiescent,
        end_time: res.end_time,
        report,
        failures,
        recovery,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FuzzReport {
    pub config: FuzzConfig,
    pub seeds: Vec<SeedOutcome>,
    #[serde(serialize_with = "secs")]
    pub elapsed: Duration,
}

fn secs<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

impl FuzzReport {
    pub fn failing(&self) -> Vec<&SeedOutcome> {
        self.seeds.iter().filter(|s| !s.ok()).collect()
    }

    pub fn ok(&self) -> bool {
        self.failing().is_empty()
    }

    pub fn replay_command(&self, seed: u64) -> String {
        format!(
            "cerberus fuzz --protocol {} --mode {} --start {seed} --seeds 1",
            self.config.protocol,
            format!("{:?}", self.config.mode).to_lowercase()
        )
    }

    pub fn summary(&self) -> String {
        let txns: usize = self.seeds.iter().map(|s| s.txns).sum();
        let committed: usize = self.seeds.iter().map(|s| s.committed).sum();
        let mut out = format!(
            "{} {:?}: {} seeds, {} txns, {} committed, {} failing, {:.1}s\n",
            self.config.protocol,
            self.config.mode,
            self.seeds.len(),
            txns,
            committed,
            self.failing().len(),
            self.elapsed.as_secs_f64()
        );
        if let Some(first) = self.failing().first() {
            out.push_str(&format!("first failing seed {}: {}\n", first.seed, first.failures.join("; ")));
            out.push_str(&format!("replay: {}\n", self.replay_command(first.seed)));
        }
        out
    }
}

/// Runs `seeds` on all available cores.
pub fn fuzz(cfg: &FuzzConfig, seeds: std::ops::Range<u64>) -> FuzzReport {
    let start = Instant::now();
    let list: Vec<u64> = seeds.collect();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(list.len().max(1));
    let mut outcomes: Vec<SeedOutcome> = if workers <= 1 {
        list.iter().map(|s| run_seed(cfg, *s)).collect()
    } else {
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let mine: Vec<u64> = list.iter().copied().skip(w).step_by(workers).collect();
                    sc.spawn(move || mine.into_iter().map(|s| run_seed(cfg, s)).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("fuzz worker panicked")).collect()
        })
    };
    outcomes.sort_by_key(|o| o.seed);
    FuzzReport { config: cfg.clone(), seeds: outcomes, elapsed: start.elapsed() }
}
