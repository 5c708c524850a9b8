//! Consensus-step cost model for uniformly placed objects.

use rand::rngs::SmallRng;
use rand::{RngCore, SeedableRng};
use serde::Serialize;
use std::io::Write;

/// Expected number of per-shard consensus steps for `n` transactions with
/// `k` inputs each over `s` shards: every transaction involves
/// `s * (1 - (1 - 1/s)^k)` shards on average.
pub fn expected_steps(k: u32, s: u64, n: u64) -> f64 {
    assert!(k >= 1 && s >= 1, "k and s must be positive");
    let s_f = s as f64;
    n as f64 * s_f * (1.0 - (1.0 - 1.0 / s_f).powi(k as i32))
}

/// Simulates `n` transactions, each drawing `k` shards uniformly with
/// replacement, and counts the distinct shards per transaction.
pub fn monte_carlo_steps(k: u32, s: u64, n: u64, seed: u64) -> u64 {
    assert!(k >= 1 && s >= 1, "k and s must be positive");
    if s == 1 {
        return n;
    }
    let mut rng = SmallRng::seed_from_u64(seed ^ (k as u64) << 32 ^ s);
    // stamp[x] == gen marks shard x as already drawn for this transaction.
    let mut stamp = vec![0u32; s as usize];
    let mut total = 0u64;
    for gen in 1..=n {
        let g = gen as u32;
        for _ in 0..k {
            let x = ((rng.next_u32() as u64 * s) >> 32) as usize;
            total += u64::from(stamp[x] != g);
            stamp[x] = g;
        }
        if g == u32::MAX {
            stamp.iter_mut().for_each(|v| *v = 0);
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostModelRow {
    pub k: u32,
    pub s: u64,
    pub n: u64,
    /// Closed-form inputs steps over all shards.
    pub total_steps: f64,
    pub steps_per_shard: f64,
    pub monte_carlo: Option<u64>,
    pub ccb_steps: f64,
    pub ocb_steps: f64,
    /// The pessimistic protocol takes two steps per involved shard.
    pub pcb_steps: f64,
}

pub fn cost_row(k: u32, s: u64, n: u64, mc_seed: Option<u64>) -> CostModelRow {
    let total = expected_steps(k, s, n);
    CostModelRow {
        k,
        s,
        n,
        total_steps: total,
        steps_per_shard: total / s as f64,
        monte_carlo: mc_seed.map(|seed| monte_carlo_steps(k, s, n, seed)),
        ccb_steps: total,
        ocb_steps: total,
        pcb_steps: 2.0 * total,
    }
}

pub fn sweep(ks: &[u32], ss: &[u64], n: u64, mc_seed: Option<u64>) -> Vec<CostModelRow> {
    ks.iter().flat_map(|k| ss.iter().map(move |s| cost_row(*k, *s, n, mc_seed))).collect()
}

/// Writes rows with the column names used by the plotting scripts.
pub fn write_csv<W: Write>(rows: &[CostModelRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "num_values_per_txn",
        "num_shards",
        "num_shard_steps",
        "num_shard_steps_avg_shard",
        "mc_shard_steps",
        "ccb_steps",
        "ocb_steps",
        "pcb_steps",
    ])?;
    for r in rows {
        let total = r.total_steps.round() as u64;
        w.write_record([
            r.k.to_string(),
            r.s.to_string(),
            total.to_string(),
            (total / r.s).to_string(),
            r.monte_carlo.map(|m| m.to_string()).unwrap_or_default(),
            (r.ccb_steps.round() as u64).to_string(),
            (r.ocb_steps.round() as u64).to_string(),
            (r.pcb_steps.round() as u64).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_shard_is_one_step_per_txn() {
        for k in [1, 2, 7, 64] {
            assert_eq!(expected_steps(k, 1, 1000), 1000.0);
            assert_eq!(monte_carlo_steps(k, 1, 1000, 3), 1000);
        }
    }

    #[test]
    fn one_input_touches_one_shard() {
        assert!((expected_steps(1, 64, 500) - 500.0).abs() < 1e-9);
        assert_eq!(monte_carlo_steps(1, 64, 500, 9), 500);
    }

    #[test]
    fn monte_carlo_is_seeded() {
        assert_eq!(monte_carlo_steps(4, 8, 10_000, 5), monte_carlo_steps(4, 8, 10_000, 5));
    }

    #[test]
    fn csv_has_expected_header() {
        let mut buf = Vec::new();
        write_csv(&sweep(&[2], &[1, 2], 16, None), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("num_values_per_txn,num_shards,num_shard_steps,num_shard_steps_avg_shard"));
        assert_eq!(s.lines().count(), 3);
    }
}
