//! Randomized crash/rejoin workloads. Crashes are spaced well beyond the
//! failure timeout and never take a cluster's last replica, so every run
//! must end with no violation and no loss.

mod common;

use std::collections::BTreeSet;

use common::*;
use disthash::dataops::SearchMode;
use disthash::protocol::ClientOp;
use disthash::sim::{Simulation, MS};
use disthash::types::{NodeId, ObjectId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Live peer whose crash cannot lose data: a plain Agent in a cluster of at
/// least three, or an RAgent with a secondary and at least two members.
fn safe_victim(sim: &Simulation, rng: &mut ChaCha8Rng) -> Option<NodeId> {
    let mut pool = Vec::new();
    for r in sim.live_ragents() {
        let cl = &sim.peer(r)?.ragent.as_ref()?.cluster;
        if cl.size() >= 3 {
            pool.extend(cl.members.iter().copied().filter(|m| sim.is_alive(*m)));
        }
        if cl.size() >= 3 && cl.secondary.is_some() && sim.live_ragents().len() > 1 {
            pool.push(r);
        }
    }
    if pool.is_empty() {
        None
    } else {
        Some(pool[rng.random_range(0..pool.len())])
    }
}

pub struct Knobs {
    min: usize,
    max: usize,
    rounds: usize,
    /// Time between rounds; crashes are at most one per round.
    gap_ms: u64,
}

pub const GENTLE: Knobs = Knobs {
    min: 2,
    max: 8,
    rounds: 12,
    gap_ms: 1_200,
};

/// Crashes barely three failure timeouts apart, with thresholds tight
/// enough that splits and merges overlap with recovery.
pub const HARSH: Knobs = Knobs {
    min: 3,
    max: 6,
    rounds: 20,
    gap_ms: 500,
};

pub fn run_chaos(seed: u64, k: &Knobs, trace: bool) -> (World, Vec<ObjectId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(2..=4);
    let sizes: Vec<usize> = (0..r).map(|_| rng.random_range(4..=9)).collect();
    let mut cfg = with_heartbeat(config(seed, k.min, k.max), 50);
    cfg.trace = trace;
    let mut w = World::build(cfg, &sizes);
    let mut ids: Vec<ObjectId> = Vec::new();
    let mut crashed: Vec<NodeId> = Vec::new();
    let mut n = 0;
    for _round in 0..k.rounds {
        let t = w.sim.now();
        let live: Vec<NodeId> = w.sim.live_agents().into_iter().filter(|a| w.sim.peer(*a).unwrap().view.is_some()).collect();
        if live.is_empty() {
            break;
        }
        let pick = |rng: &mut ChaCha8Rng| live[rng.random_range(0..live.len())];
        for k in 0..rng.random_range(3..10) {
            let at = t + k * 7 * MS;
            match rng.random_range(0..10) {
                0..=3 => {
                    let obj = random_object(&mut rng, n);
                    n += 1;
                    ids.push(obj.id);
                    let via = pick(&mut rng);
                    w.insert(at, via, obj);
                }
                4..=6 if !ids.is_empty() => {
                    let id = ids[rng.random_range(0..ids.len())];
                    let via = pick(&mut rng);
                    let payload = format!("upd-{n}").into_bytes();
                    n += 1;
                    w.submit(at, via, ClientOp::Update { id, payload });
                }
                _ => {
                    let mode = if rng.random_bool(0.5) { SearchMode::All } else { SearchMode::First };
                    let criterion = random_criterion(&mut rng);
                    let via = pick(&mut rng);
                    w.submit(at, via, ClientOp::Search { criterion, mode });
                }
            }
        }
        match rng.random_range(0..3) {
            0 => {
                if let Some(v) = safe_victim(&w.sim, &mut rng) {
                    w.sim.schedule_crash(t + 30 * MS, v).unwrap();
                    crashed.push(v);
                }
            }
            1 if !crashed.is_empty() => {
                let v = crashed.remove(rng.random_range(0..crashed.len()));
                w.sim.schedule_rejoin(t + 30 * MS, v).unwrap();
            }
            _ => {}
        }
        w.settle(k.gap_ms * MS);
    }
    w.sim.run();
    (w, ids)
}

fn chaos(seed: u64, k: &Knobs) -> Result<String, String> {
    let (w, ids) = run_chaos(seed, k, false);
    let lost = w.sim.lost_objects();
    if !lost.is_empty() {
        return Err(format!("seed {seed}: {} objects lost", lost.len()));
    }
    let v = w.sim.check(&BTreeSet::new());
    if let Some(first) = v.first() {
        return Err(format!("seed {seed}: {} violations, first {first}", v.len()));
    }
    Ok(format!("seed {seed}: {} objects, {} ops", ids.len(), w.sim.ops().len()))
}

#[test]
fn chaos_runs_settle_without_violations() {
    let failures: Vec<String> = (0..40).filter_map(|s| chaos(s, &GENTLE).err()).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn harsh_chaos_runs_settle_without_violations() {
    let n: u64 = std::env::var("CHAOS_SEEDS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let failures: Vec<String> = (0..n).filter_map(|s| chaos(s, &HARSH).err()).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
