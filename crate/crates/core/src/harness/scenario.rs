//! Scenario files: a TOML description of topology, objects, transactions,
//! network behaviour and adversary, resolved into a [`RunConfig`].

use crate::consensus::{ProposalWindow, ShardConfig};
use crate::ids::{ClientId, NodeId, Protocol, ReplicaId, ShardId, Time, TxnId};
use crate::object_model::{Directory, Keyring, Ledger, LedgerExt, ObjectId, ShardAssignment, Transaction};
use crate::protocol::{ByzConfig, ClientTxn, RunConfig, Timing, Topology};
use crate::sim::{Action, AdversaryScript, NetworkConfig, Rule, Selector, TraceLevel};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use toml::Spanned;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub protocol: Protocol,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_max_time")]
    pub max_time: Time,
    #[serde(default)]
    pub trace: Option<TraceLevel>,
    pub topology: TopologySpec,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub clients: Vec<ClientSpec>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub txns: Vec<TxnSpec>,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub byzantine: ByzConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_max_time() -> Time {
    200_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub shards: u32,
    pub n: u32,
    pub f: u32,
    #[serde(default = "default_window")]
    pub window: u64,
    #[serde(default = "default_attempts")]
    pub ocb_max_attempts: u32,
    /// Seed of the signing keys; defaults to the scenario seed.
    #[serde(default)]
    pub key_seed: Option<u64>,
}

fn default_window() -> u64 {
    ProposalWindow::default().width
}

fn default_attempts() -> u32 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub id: u32,
    #[serde(default)]
    pub malicious: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub shard: u32,
    pub owner: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxnSpec {
    pub id: u64,
    pub client: u32,
    /// Object names, or `tN.i` for output `i` of transaction `N`.
    pub inputs: Vec<String>,
    /// Owner of each output.
    #[serde(default)]
    pub outputs: Vec<u32>,
    /// Shard of each output; hashed placement when absent.
    #[serde(default)]
    pub output_shards: Vec<u32>,
    pub at: Time,
    /// Shards the client contacts; every involved shard when absent.
    #[serde(default)]
    pub targets: Option<Vec<u32>>,
    /// Inputs whose support token is forged.
    #[serde(default)]
    pub forge: Vec<String>,
    /// Inputs whose support token is left out.
    #[serde(default)]
    pub omit: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    /// Corrupted replicas as `"shard:idx"`.
    #[serde(default)]
    pub corrupted: Vec<String>,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
}

/// Node selectors are `any`, `corrupted`, `good`, `S<k>`, or a list of
/// node names (`r<s>.<i>`, `c<k>`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SelectorSpec {
    One(String),
    Nodes(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub from: SelectorSpec,
    pub to: SelectorSpec,
    #[serde(default)]
    pub msg_types: Vec<String>,
    #[serde(default)]
    pub during: Option<[Time; 2]>,
    /// `drop`, `delay N`, `reorder N` or `withhold`.
    pub action: String,
    /// Receivers for `withhold`.
    #[serde(default)]
    pub withhold_from: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("{0}")]
    Unlocated(String),
}

/// Byte offsets of the array entries and sections, for error messages.
#[derive(Default, Deserialize)]
struct Spans {
    #[serde(default)]
    topology: Option<Spanned<toml::Value>>,
    #[serde(default)]
    objects: Vec<Spanned<toml::Value>>,
    #[serde(default)]
    txns: Vec<Spanned<toml::Value>>,
    #[serde(default)]
    adversary: Option<Spanned<toml::Value>>,
    #[serde(default)]
    clients: Vec<Spanned<toml::Value>>,
}

#[derive(Clone, Copy, Debug)]
enum Loc {
    Topology,
    Object(usize),
    Txn(usize),
    Adversary,
    Client(usize),
}

struct Locator<'a> {
    src: &'a str,
    spans: Spans,
}

impl Locator<'_> {
    fn line_of(&self, at: Loc) -> Option<usize> {
        let span = match at {
            Loc::Topology => self.spans.topology.as_ref().map(|s| s.span()),
            Loc::Adversary => self.spans.adversary.as_ref().map(|s| s.span()),
            Loc::Object(i) => self.spans.objects.get(i).map(|s| s.span()),
            Loc::Txn(i) => self.spans.txns.get(i).map(|s| s.span()),
            Loc::Client(i) => self.spans.clients.get(i).map(|s| s.span()),
        }?;
        Some(self.src[..span.start.min(self.src.len())].matches('\n').count() + 1)
    }
}

/// A validated scenario ready to run.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub names: BTreeMap<String, ObjectId>,
    pub config: RunConfig,
}

impl Scenario {
    pub fn parse(src: &str) -> Result<Scenario, ScenarioError> {
        let file: ScenarioFile = toml::from_str(src).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let spans: Spans = toml::from_str(src).unwrap_or_default();
        let loc = Locator { src, spans };
        build(file, Some(&loc))
    }

    pub fn from_file(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
        build(file, None)
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario, ScenarioError> {
        let src = std::fs::read_to_string(path).map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        Scenario::parse(&src).map_err(|e| match e {
            ScenarioError::Parse(m) => ScenarioError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn object(&self, name: &str) -> ObjectId {
        self.names[name]
    }

    /// The same scenario with a different seed for network randomness.
    pub fn with_seed(mut self, seed: u64) -> Scenario {
        self.file.seed = seed;
        self.config.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("scenario serializes")
    }
}

fn build(file: ScenarioFile, loc: Option<&Locator>) -> Result<Scenario, ScenarioError> {
    let err = |at: Loc, msg: String| match loc.and_then(|l| l.line_of(at)) {
        Some(line) => ScenarioError::Invalid { line, msg },
        None => ScenarioError::Unlocated(msg),
    };
    let t = &file.topology;
    if t.shards == 0 {
        return Err(err(Loc::Topology, "at least one shard is required".into()));
    }
    if t.n <= 3 * t.f {
        return Err(err(Loc::Topology, format!("n = {} must exceed 3f = {}", t.n, 3 * t.f)));
    }
    if t.window == 0 {
        return Err(err(Loc::Topology, "window must be positive".into()));
    }
    let mut shards = BTreeMap::new();
    for s in 0..t.shards {
        let cfg = ShardConfig::new(ShardId(s), t.n, t.f).map_err(|e| err(Loc::Topology, e.to_string()))?;
        shards.insert(ShardId(s), Arc::new(cfg));
    }
    let shard_ok = |s: u32| s < t.shards;

    let mut directory = Directory::default();
    let mut clients = BTreeSet::new();
    for (i, c) in file.clients.iter().enumerate() {
        if !clients.insert(ClientId(c.id)) {
            return Err(err(Loc::Client(i), format!("client {} declared twice", c.id)));
        }
        if c.malicious {
            directory.malicious.insert(ClientId(c.id));
        }
    }

    let mut assign = ShardAssignment::new(t.shards);
    let mut names = BTreeMap::new();
    let mut owner_of = BTreeMap::new();
    let mut genesis: BTreeMap<ShardId, Ledger> = shards.keys().map(|s| (*s, Ledger::new())).collect();
    for (i, o) in file.objects.iter().enumerate() {
        if !shard_ok(o.shard) {
            return Err(err(Loc::Object(i), format!("object `{}` placed on unknown shard {}", o.name, o.shard)));
        }
        if !clients.contains(&ClientId(o.owner)) {
            return Err(err(Loc::Object(i), format!("object `{}` has undeclared owner {}", o.name, o.owner)));
        }
        let id = ObjectId::genesis(i as u32);
        if names.insert(o.name.clone(), id).is_some() {
            return Err(err(Loc::Object(i), format!("object `{}` declared twice", o.name)));
        }
        assign = assign.with_override(id, ShardId(o.shard));
        owner_of.insert(id, ClientId(o.owner));
        genesis.get_mut(&ShardId(o.shard)).unwrap().construct(id, ClientId(o.owner), 0).expect("fresh object");
    }
    directory.owners.extend(owner_of.iter().map(|(o, c)| (*o, *c)));

    let key_seed = t.key_seed.unwrap_or(file.seed);
    let keyring = Keyring::new(key_seed);
    let mut seen_txns = BTreeSet::new();
    let mut outputs_of: BTreeMap<u64, usize> = BTreeMap::new();
    let mut workload = Vec::new();
    for (i, ts) in file.txns.iter().enumerate() {
        let at = Loc::Txn(i);
        if ts.id == TxnId::GENESIS.0 {
            return Err(err(at, "transaction id 0 is reserved".into()));
        }
        if !seen_txns.insert(ts.id) {
            return Err(err(at, format!("transaction {} declared twice", ts.id)));
        }
        if !clients.contains(&ClientId(ts.client)) {
            return Err(err(at, format!("transaction {} uses undeclared client {}", ts.id, ts.client)));
        }
        let resolve = |r: &str| -> Result<ObjectId, ScenarioError> {
            if let Some(id) = names.get(r) {
                return Ok(*id);
            }
            let parsed = r.strip_prefix('t').and_then(|rest| rest.split_once('.')).and_then(|(a, b)| {
                Some((a.parse::<u64>().ok()?, b.parse::<u32>().ok()?))
            });
            match parsed {
                Some((txn, idx)) if outputs_of.get(&txn).map(|n| (idx as usize) < *n).unwrap_or(false) => {
                    Ok(ObjectId::new(TxnId(txn), idx))
                }
                _ => Err(err(at, format!("transaction {} references unknown object `{r}`", ts.id))),
            }
        };
        let inputs = ts.inputs.iter().map(|r| resolve(r)).collect::<Result<Vec<_>, _>>()?;
        let forge = ts.forge.iter().map(|r| resolve(r)).collect::<Result<BTreeSet<_>, _>>()?;
        let omit = ts.omit.iter().map(|r| resolve(r)).collect::<Result<BTreeSet<_>, _>>()?;
        for o in ts.outputs.iter() {
            if !clients.contains(&ClientId(*o)) {
                return Err(err(at, format!("transaction {} has output for undeclared owner {o}", ts.id)));
            }
        }
        if !ts.output_shards.is_empty() && ts.output_shards.len() != ts.outputs.len() {
            return Err(err(at, format!("transaction {}: output_shards must list one shard per output", ts.id)));
        }
        let tid = TxnId(ts.id);
        let mut support = BTreeMap::new();
        for o in &inputs {
            if omit.contains(o) {
                continue;
            }
            let owner = directory.owner(o).expect("resolved objects have owners");
            let tok = if forge.contains(o) { keyring.forge(owner, tid) } else { keyring.sign(owner, tid) };
            support.insert(*o, tok);
        }
        let owners: Vec<ClientId> = ts.outputs.iter().map(|c| ClientId(*c)).collect();
        let txn = Transaction::new(tid, ClientId(ts.client), inputs, &owners, support)
            .map_err(|e| err(at, format!("transaction {}: {e}", ts.id)))?;
        for (k, s) in ts.output_shards.iter().enumerate() {
            if !shard_ok(*s) {
                return Err(err(at, format!("transaction {} places an output on unknown shard {s}", ts.id)));
            }
            assign = assign.with_override(ObjectId::new(tid, k as u32), ShardId(*s));
        }
        let targets = match &ts.targets {
            None => None,
            Some(v) => {
                if let Some(bad) = v.iter().find(|s| !shard_ok(**s)) {
                    return Err(err(at, format!("transaction {} targets unknown shard {bad}", ts.id)));
                }
                Some(v.iter().map(|s| ShardId(*s)).collect())
            }
        };
        directory.register_txn(&txn);
        outputs_of.insert(ts.id, ts.outputs.len());
        workload.push(ClientTxn { txn: Arc::new(txn), at: ts.at, targets });
    }

    let mut script = AdversaryScript::default();
    for c in &file.adversary.corrupted {
        let r = parse_replica_pair(c)
            .filter(|r| shard_ok(r.shard.0) && r.idx < t.n)
            .ok_or_else(|| err(Loc::Adversary, format!("bad corrupted replica `{c}` (expected shard:idx)")))?;
        script.corrupted.entry(r.shard).or_default().insert(r);
    }
    script.check_bounds(|_| t.f).map_err(|e| err(Loc::Adversary, e.to_string()))?;
    for r in &file.adversary.rules {
        let rule = rule_of(r, t).map_err(|m| err(Loc::Adversary, m))?;
        script.rules.push(rule);
    }

    let topo = Topology {
        shards,
        assign,
        keyring,
        directory,
        genesis,
        timing: file.timing.clone(),
        window: ProposalWindow { width: t.window },
        ocb_max_attempts: t.ocb_max_attempts.max(1),
    };
    let config = RunConfig {
        protocol: file.protocol,
        scenario: file.name.clone(),
        topo: Arc::new(topo),
        net: file.network.clone(),
        script,
        byz: file.byzantine.clone(),
        seed: file.seed,
        trace_level: file.trace.unwrap_or(TraceLevel::Full),
        max_time: file.max_time,
        workload,
    };
    Ok(Scenario { file, names, config })
}

fn parse_replica_pair(s: &str) -> Option<ReplicaId> {
    let (a, b) = s.split_once(':')?;
    Some(ReplicaId::new(a.trim().parse().ok()?, b.trim().parse().ok()?))
}

pub fn parse_node(s: &str) -> Option<NodeId> {
    if let Some(rest) = s.strip_prefix('r') {
        let (a, b) = rest.split_once('.')?;
        return Some(NodeId::Replica(ReplicaId::new(a.parse().ok()?, b.parse().ok()?)));
    }
    if let Some(rest) = s.strip_prefix('c') {
        return Some(NodeId::Client(ClientId(rest.parse().ok()?)));
    }
    None
}

fn selector_of(s: &SelectorSpec, t: &TopologySpec) -> Result<Selector, String> {
    let nodes = |v: &[String]| -> Result<Selector, String> {
        let mut set = BTreeSet::new();
        for n in v {
            let id = parse_node(n).ok_or_else(|| format!("bad node name `{n}`"))?;
            if let NodeId::Replica(r) = id {
                if r.shard.0 >= t.shards || r.idx >= t.n {
                    return Err(format!("node `{n}` does not exist"));
                }
            }
            set.insert(id);
        }
        Ok(Selector::Nodes(set))
    };
    match s {
        SelectorSpec::Nodes(v) => nodes(v),
        SelectorSpec::One(x) => match x.as_str() {
            "any" => Ok(Selector::Any),
            "corrupted" => Ok(Selector::Corrupted),
            "good" => Ok(Selector::Good),
            other => {
                if let Some(k) = other.strip_prefix('S').and_then(|k| k.parse::<u32>().ok()) {
                    if k >= t.shards {
                        return Err(format!("shard `{other}` does not exist"));
                    }
                    Ok(Selector::Shard(ShardId(k)))
                } else {
                    nodes(&[other.to_string()])
                }
            }
        },
    }
}

fn rule_of(r: &RuleSpec, t: &TopologySpec) -> Result<Rule, String> {
    let mut parts = r.action.split_whitespace();
    let verb = parts.next().unwrap_or("");
    let amount = || -> Result<Time, String> {
        parts.clone().next().and_then(|a| a.parse().ok()).ok_or_else(|| format!("action `{}` needs a tick count", r.action))
    };
    let action = match verb {
        "drop" => Action::Drop,
        "delay" => Action::Delay(amount()?),
        "reorder" => Action::Reorder(amount()?),
        "withhold" => {
            let mut set = BTreeSet::new();
            for n in &r.withhold_from {
                set.insert(parse_node(n).ok_or_else(|| format!("bad node name `{n}`"))?);
            }
            Action::WithholdFrom(set)
        }
        other => return Err(format!("unknown action `{other}`")),
    };
    Ok(Rule {
        from: selector_of(&r.from, t)?,
        to: selector_of(&r.to, t)?,
        msg_types: r.msg_types.clone(),
        during: r.during.map(|[a, b]| (a, b)),
        action,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
protocol = "ccb"

[topology]
shards = 2
n = 4
f = 1

[[clients]]
id = 1

[[objects]]
name = "o1"
shard = 0
owner = 1

[[txns]]
id = 1
client = 1
inputs = ["o1"]
outputs = [1]
output_shards = [1]
at = 5
"#;

    #[test]
    fn resolves_names_and_placements() {
        let s = Scenario::parse(BASE).unwrap();
        let o1 = s.object("o1");
        let topo = &s.config.topo;
        assert_eq!(topo.assign.placement(o1), ShardId(0));
        assert_eq!(topo.assign.placement(ObjectId::new(TxnId(1), 0)), ShardId(1));
        assert_eq!(s.config.workload.len(), 1);
        assert!(topo.admissible(&s.config.workload[0].txn, ShardId(0)).is_ok());
    }

    #[test]
    fn unknown_object_reports_line() {
        let src = BASE.replace("inputs = [\"o1\"]", "inputs = [\"o9\"]");
        match Scenario::parse(&src) {
            Err(ScenarioError::Invalid { line, msg }) => {
                assert!(msg.contains("o9"));
                assert_eq!(src.lines().nth(line - 1).unwrap().trim(), "[[txns]]");
            }
            other => panic!("expected located error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_too_many_corrupted() {
        let src = format!("{BASE}\n[adversary]\ncorrupted = [\"0:1\", \"0:2\"]\n");
        let e = Scenario::parse(&src).unwrap_err().to_string();
        assert!(e.contains("tolerates only 1"), "{e}");
    }

    #[test]
    fn rejects_small_shards() {
        let src = BASE.replace("n = 4", "n = 3");
        assert!(Scenario::parse(&src).unwrap_err().to_string().contains("must exceed"));
    }

    #[test]
    fn forged_support_is_inadmissible() {
        let src = BASE.replace("at = 5", "at = 5\nforge = [\"o1\"]");
        let s = Scenario::parse(&src).unwrap();
        assert!(s.config.topo.admissible(&s.config.workload[0].txn, ShardId(0)).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::parse(BASE).unwrap();
        let again = Scenario::parse(&s.to_toml()).unwrap();
        assert_eq!(again.file, s.file);
    }

    #[test]
    fn rules_parse() {
        let src = format!(
            "{BASE}\n[adversary]\ncorrupted = [\"0:3\"]\n[[adversary.rules]]\nfrom = \"corrupted\"\nto = [\"r0.1\", \"r1.2\"]\naction = \"delay 7\"\nduring = [0, 100]\n"
        );
        let s = Scenario::parse(&src).unwrap();
        assert_eq!(s.config.script.rules[0].action, Action::Delay(7));
        assert_eq!(s.config.script.rules[0].during, Some((0, 100)));
    }
}
