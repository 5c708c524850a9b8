//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

mod common;

use cerberus::analysis::costs::{conformance, measure};
use cerberus::analysis::serial::{committed_txns, genesis_ledger, valid_serial_orders};
use cerberus::analysis::{check_serializable, expected_steps, monte_carlo_steps, Check, Status};
use cerberus::harness::fuzz::{fuzz, generate, FuzzConfig, FuzzMode, FuzzReport, Recovery};
use cerberus::harness::Scenario;
use cerberus::ids::{Decision, Protocol, ShardId, TxnId};
use cerberus::object_model::ObjectStatus;
use cerberus::protocol::{run, RunResult};
use common::bundled;
use std::path::PathBuf;
use std::time::Instant;

struct Suite {
    failed: usize,
}

impl Suite {
    fn report(&mut self, name: &str, res: Result<String, String>, started: Instant) {
        let secs = started.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1}s)"),
            Err(why) => {
                self.failed += 1;
                println!("FAIL {name}: {why} ({secs:.1}s)");
            }
        }
    }
}

fn ensure(cond: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

fn step_model() -> Result<String, String> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/step_table.csv");
    let mut rd = csv::Reader::from_path(&p).map_err(|e| e.to_string())?;
    let mut cells = 0;
    let mut worst_table = 0f64;
    let mut worst_mc = 0f64;
    let start = Instant::now();
    for row in rd.records() {
        let row = row.map_err(|e| e.to_string())?;
        let k: u32 = row[0].parse().map_err(|_| "bad k".to_string())?;
        let s: u64 = row[1].parse().map_err(|_| "bad s".to_string())?;
        let table: f64 = row[2].parse().map_err(|_| "bad steps".to_string())?;
        let closed = expected_steps(k, s, 1 << 24);
        let rel = (closed - table).abs() / table;
        worst_table = worst_table.max(rel);
        ensure(rel <= 0.002, || format!("k={k} s={s}: closed form {closed:.0} vs table {table} ({:.3}%)", rel * 100.0))?;
        let n = 1 << 20;
        let mc = monte_carlo_steps(k, s, n, 7) as f64;
        let cf = expected_steps(k, s, n);
        let rel = (mc - cf).abs() / cf;
        worst_mc = worst_mc.max(rel);
        ensure(rel <= 0.005, || format!("k={k} s={s}: Monte-Carlo {mc} vs closed form {cf:.0}"))?;
        cells += 1;
    }
    ensure(cells == 90, || format!("expected 90 table cells, found {cells}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{cells} cells, worst closed-form error {:.4}%, worst Monte-Carlo error {:.4}%",
        worst_table * 100.0,
        worst_mc * 100.0
    ))
}

fn good_status(r: &RunResult, sc: &Scenario, name: &str, shard: u32) -> Vec<ObjectStatus> {
    let o = sc.object(name);
    r.ledgers.iter().filter(|(rep, _)| rep.shard == ShardId(shard) && r.is_good(**rep)).map(|(_, l)| l[&o].status).collect()
}

fn aborted_everywhere(r: &RunResult, t: u64) -> bool {
    let d = r.decisions(TxnId(t));
    d.len() == 2 && d.values().all(|s| s.len() == 1 && s.contains(&Decision::Abort))
}

fn follow_up(name: &str) -> Scenario {
    let mut file = bundled(name).file;
    let mut t = file.txns[0].clone();
    t.id = 3;
    t.client = 1;
    t.inputs = vec!["o1".into()];
    t.outputs = vec![2];
    t.output_shards = vec![0];
    t.at = 5_000;
    t.targets = None;
    t.forge.clear();
    t.omit.clear();
    file.txns.push(t);
    Scenario::from_file(file).expect("follow-up scenario validates")
}

fn races() -> Result<String, String> {
    let sc = bundled("ccb_race.scenario");
    let r = run(sc.config.clone());
    ensure(aborted_everywhere(&r, 1) && aborted_everywhere(&r, 2), || "ccb: not both aborted".into())?;
    for (o, s) in [("o1", 0), ("o2", 1)] {
        ensure(good_status(&r, &sc, o, s).iter().all(|x| *x == ObjectStatus::Pledged), || format!("ccb: {o} not pledged"))?;
    }
    let r = run(follow_up("ccb_race.scenario").config);
    ensure(!r.committed().contains(&TxnId(3)), || "ccb: pledged o1 was spent later".into())?;

    let r = run(bundled("ocb_race.scenario").config);
    ensure(r.view_changes(ShardId(0)) > 0 && r.view_changes(ShardId(1)) > 0, || "ocb: no view change in both shards".into())?;
    ensure(r.committed().is_empty(), || format!("ocb: committed {:?}", r.committed()))?;

    let sc = bundled("pcb_race.scenario");
    let r = run(sc.config.clone());
    ensure(aborted_everywhere(&r, 1) && aborted_everywhere(&r, 2), || "pcb: not both aborted".into())?;
    for (o, s) in [("o1", 0), ("o2", 1)] {
        ensure(good_status(&r, &sc, o, s).iter().all(|x| *x == ObjectStatus::Constructed), || format!("pcb: {o} not restored"))?;
    }
    let sc = follow_up("pcb_race.scenario");
    let r = run(sc.config.clone());
    ensure(r.committed().contains(&TxnId(3)), || "pcb: restored o1 not spendable".into())?;
    ensure(good_status(&r, &sc, "o1", 0).iter().all(|x| *x == ObjectStatus::Destructed), || "pcb: o1 not consumed".into())?;
    Ok("ccb aborts and keeps pledges, ocb fails the round, pcb aborts and restores".into())
}

fn cost_table() -> Result<String, String> {
    for p in [Protocol::Ccb, Protocol::Ocb, Protocol::Pcb] {
        for s in 2..=4 {
            let r = run(common::single_multishard(p, s).config);
            let m = measure(&r, TxnId(1), 10).ok_or_else(|| format!("{p} s={s}: nothing measured"))?;
            ensure(r.committed().contains(&TxnId(1)), || format!("{p} s={s}: did not commit"))?;
            let bad = conformance(p, &m);
            ensure(bad.is_empty(), || bad.join("; "))?;
        }
    }
    Ok("ccb (s,1,4), ocb (s,3,3), pcb (2s,1,7) for s = 2, 3, 4".into())
}

fn safety(reports: &[FuzzReport]) -> Result<String, String> {
    let mut runs = 0;
    for rep in reports {
        ensure(rep.seeds.len() >= 500, || format!("{}: only {} seeds", rep.config.protocol, rep.seeds.len()))?;
        for s in &rep.seeds {
            runs += 1;
            if !s.report.safety_ok() {
                let why: Vec<String> = s
                    .report
                    .failures()
                    .into_iter()
                    .filter(|(c, _)| !c.is_liveness())
                    .map(|(c, w)| format!("{}: {}", c.label(), w.first().cloned().unwrap_or_default()))
                    .collect();
                return Err(format!("{} seed {}: {}", rep.config.protocol, s.seed, why.join("; ")));
            }
        }
    }
    Ok(format!("{runs} adversarial runs, no violations"))
}

/// Liveness over reports whose scope claims it; counts runs where it was
/// actually checked.
fn liveness(reports: &[&FuzzReport]) -> Result<String, String> {
    let mut parts = Vec::new();
    for rep in reports {
        let mut checked = 0;
        for s in &rep.seeds {
            match s.report.checks.get(&Check::R5Service) {
                Some(Status::Skipped(_)) | None => continue,
                _ => checked += 1,
            }
            for c in [Check::R5Service, Check::R6Confirmation] {
                if let Some(Status::Fail(w)) = s.report.checks.get(&c) {
                    return Err(format!(
                        "{} {:?} seed {}: {}",
                        rep.config.protocol,
                        rep.config.mode,
                        s.seed,
                        w.first().cloned().unwrap_or_default()
                    ));
                }
            }
        }
        ensure(checked > 0, || format!("{} {:?}: liveness never checked", rep.config.protocol, rep.config.mode))?;
        parts.push(format!("{} {:?} {checked}", rep.config.protocol, rep.config.mode).to_lowercase());
    }
    Ok(format!("checked runs: {}", parts.join(", ")))
}

fn recovery() -> Result<String, String> {
    let rep = fuzz(&FuzzConfig::new(Protocol::Ocb, FuzzMode::Attack), 0..100);
    let mut held = 0;
    for s in &rep.seeds {
        match &s.recovery {
            Some(Recovery::Held) => held += 1,
            Some(Recovery::Violated(why)) => return Err(format!("seed {}: {why}", s.seed)),
            _ => {}
        }
        ensure(s.report.safety_ok(), || format!("seed {}: safety failure", s.seed))?;
    }
    ensure(held >= 50, || format!("recovery triggered in only {held} seeds"))?;
    Ok(format!("held in {held} of {} attacked runs, none violated", rep.seeds.len()))
}

fn oracle() -> Result<String, String> {
    let mut checked = 0;
    for p in [Protocol::Ccb, Protocol::Ocb, Protocol::Pcb] {
        for mode in [FuzzMode::Adversarial, FuzzMode::Optimistic] {
            let mut cfg = FuzzConfig::new(p, mode);
            cfg.max_txns = 8;
            cfg.shards = 2;
            cfg.n = 4;
            cfg.f = 1;
            for seed in 0..40 {
                let sc = Scenario::from_file(generate(&cfg, seed)).map_err(|e| e.to_string())?;
                let r = run(sc.config);
                let txns = committed_txns(&r);
                if txns.is_empty() || txns.len() > 6 {
                    continue;
                }
                let order = check_serializable(&r).map_err(|e| format!("{p} seed {seed}: {e}"))?;
                let orders = valid_serial_orders(&genesis_ledger(&r), &txns);
                ensure(orders.contains(&order), || format!("{p} seed {seed}: {order:?} is not a valid serial order"))?;
                checked += 1;
            }
        }
    }
    ensure(checked >= 50, || format!("only {checked} small traces"))?;
    Ok(format!("{checked} traces with 1 to 6 committed transactions"))
}

fn main() {
    let mut suite = Suite { failed: 0 };

    let t = Instant::now();
    suite.report("step-count model", step_model(), t);
    let t = Instant::now();
    suite.report("race replays", races(), t);
    let t = Instant::now();
    suite.report("cost table", cost_table(), t);

    let t = Instant::now();
    let adversarial: Vec<FuzzReport> = [Protocol::Pcb, Protocol::Ccb, Protocol::Ocb]
        .into_iter()
        .map(|p| fuzz(&FuzzConfig::new(p, FuzzMode::Adversarial), 0..500))
        .collect();
    suite.report("safety", safety(&adversarial), t);

    let t = Instant::now();
    let ccb_honest = fuzz(&FuzzConfig::new(Protocol::Ccb, FuzzMode::Honest), 0..500);
    let ocb_optimistic = fuzz(&FuzzConfig::new(Protocol::Ocb, FuzzMode::Optimistic), 0..500);
    let scoped = [&adversarial[0], &adversarial[1], &ccb_honest, &ocb_optimistic];
    suite.report("scoped liveness", liveness(&scoped), t);

    let t = Instant::now();
    suite.report("ocb recovery", recovery(), t);
    let t = Instant::now();
    suite.report("small-instance oracle", oracle(), t);

    println!("NOT REPRODUCIBLE absolute throughput: the bandwidth model lacks message sizes; covered by the step-count and cost-table lines");

    if suite.failed > 0 {
        println!("{} criteria failed", suite.failed);
        std::process::exit(1);
    }
}
