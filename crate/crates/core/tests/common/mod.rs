#![allow(dead_code)]

use cerberus::harness::scenario::{ClientSpec, ObjectSpec, ScenarioFile, TopologySpec, TxnSpec};
use cerberus::harness::Scenario;
use cerberus::ids::Protocol;
use cerberus::sim::NetworkConfig;
use std::path::PathBuf;

pub fn bundled(name: &str) -> Scenario {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    Scenario::load(&p).unwrap()
}

/// One honest transaction with one input on each of `s` shards.
pub fn single_multishard(protocol: Protocol, s: u32) -> Scenario {
    let objects: Vec<ObjectSpec> = (0..s).map(|i| ObjectSpec { name: format!("o{i}"), shard: i, owner: 1 }).collect();
    let file = ScenarioFile {
        name: format!("{protocol}_{s}_shards"),
        protocol,
        seed: 3,
        max_time: 20_000,
        trace: None,
        topology: TopologySpec { shards: s, n: 4, f: 1, window: 16, ocb_max_attempts: 2, key_seed: None },
        network: NetworkConfig { fixed_delay: true, ..Default::default() },
        timing: Default::default(),
        clients: vec![ClientSpec { id: 1, malicious: false }, ClientSpec { id: 2, malicious: false }],
        txns: vec![TxnSpec {
            id: 1,
            client: 1,
            inputs: objects.iter().map(|o| o.name.clone()).collect(),
            outputs: vec![2],
            output_shards: vec![0],
            at: 10,
            targets: None,
            forge: vec![],
            omit: vec![],
        }],
        objects,
        adversary: Default::default(),
        byzantine: Default::default(),
    };
    Scenario::from_file(file).unwrap()
}
