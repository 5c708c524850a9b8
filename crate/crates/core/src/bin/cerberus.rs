use anyhow::{bail, Context, Result};
use cerberus::analysis::costs::comparison_table;
use cerberus::analysis::steps::{sweep, write_csv};
use cerberus::harness::fuzz::{fuzz, FuzzConfig, FuzzMode};
use cerberus::harness::{run_scenario, Scenario};
use cerberus::ids::Protocol;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "cerberus", about = "Simulate and check multi-shard commit protocols")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and check the result.
    Run {
        scenario: PathBuf,
        #[arg(long, env = "CERBERUS_OUT", default_value = "out")]
        out: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Consensus-step cost model as CSV.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        k: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256,512,1024,2048,4096,8192,16384")]
        s: Vec<u64>,
        #[arg(long, default_value_t = 1 << 20)]
        n: u64,
        /// Add a Monte-Carlo column drawn with this seed.
        #[arg(long)]
        mc_seed: Option<u64>,
        /// Output file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random scenarios checked against every requirement.
    Fuzz {
        #[arg(long, default_value = "pcb")]
        protocol: Protocol,
        #[arg(long, value_enum, default_value = "adversarial")]
        mode: FuzzMode,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long, default_value_t = 4)]
        shards: u32,
        #[arg(long, default_value_t = 7)]
        n: u32,
        #[arg(long, default_value_t = 2)]
        f: u32,
        /// Write the per-seed outcomes as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the per-protocol cost table.
    Costs,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { scenario, out, seed } => {
            let mut sc = Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            if let Some(s) = seed {
                sc = sc.with_seed(s);
            }
            let o = run_scenario(&sc, &out)?;
            print!("{}", o.report);
            match &o.serial {
                Ok(order) => println!("serializable ({} committed)", order.len()),
                Err(e) => println!("not serializable: {e}"),
            }
            for f in &o.files {
                println!("wrote {}", f.display());
            }
            if !o.ok() {
                bail!("checks failed");
            }
        }
        Cmd::Sweep { k, s, n, mc_seed, out } => {
            let rows = sweep(&k, &s, n, mc_seed);
            match out {
                Some(p) => write_csv(&rows, std::fs::File::create(&p)?)?,
                None => write_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Cmd::Fuzz { protocol, mode, seeds, start, shards, n, f, json } => {
            let mut cfg = FuzzConfig::new(protocol, mode);
            cfg.shards = shards;
            cfg.n = n;
            cfg.f = f;
            let r = fuzz(&cfg, start..start + seeds);
            print!("{}", r.summary());
            for s in r.failing() {
                println!("seed {}: {}", s.seed, s.failures.join("; "));
            }
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&r)?)?;
            }
            if !r.ok() {
                bail!("{} failing seeds", r.failing().len());
            }
        }
        Cmd::Costs => {
            println!("protocol  slots  exchange  phases  conflicts / view change");
            for c in comparison_table() {
                println!(
                    "{:<8}  {:>4}s  {:>8}  {:>6}  {} / {}",
                    c.protocol.to_string(),
                    c.consensus_factor,
                    c.exchange,
                    c.phases,
                    c.conflict_handling,
                    c.view_change_scope
                );
            }
        }
    }
    Ok(())
}
