//! Drives a simulation from a parsed scenario.

use std::collections::{BTreeMap, BTreeSet};

use super::scenario::{EventKind, Scenario};
use crate::protocol::{ClientOp, RequestId};
use crate::sim::{SimError, SimTime, Simulation, Violation, MS};
use crate::types::{NodeId, ObjectId};

/// Client used when an event names none.
pub const DEFAULT_CLIENT: &str = "c0";

pub struct Outcome {
    pub sim: Simulation,
    pub labels: BTreeMap<String, ObjectId>,
    pub expected_lost: BTreeSet<ObjectId>,
    pub violations: Vec<Violation>,
    pub end: SimTime,
}

impl Outcome {
    pub fn label_of(&self, id: ObjectId) -> Option<&str> {
        self.labels.iter().find(|(_, v)| **v == id).map(|(k, _)| k.as_str())
    }
}

/// Builds the simulation, feeds it every event at its time, lets it settle
/// and checks the global invariants. `seed` overrides the scenario's.
pub fn execute(s: &Scenario, seed: Option<u64>, trace: bool) -> Result<Outcome, SimError> {
    let mut cfg = s.config.to_sim_config();
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.trace = trace;
    let mut sim = Simulation::new(cfg);
    for n in &s.nodes {
        sim.add_node(&n.name, n.role, n.locality.clone())?;
    }
    // explicit joins must be known before start() arms the default ones
    for e in &s.events {
        if let EventKind::Join { node } = &e.kind {
            let id = lookup(&sim, node)?;
            sim.schedule_join(e.time_ms * MS, id)?;
        }
    }
    sim.start();

    let labels: BTreeMap<String, ObjectId> = s
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Insert { label, .. } => Some((label.clone(), s.object(label)?.id)),
            _ => None,
        })
        .collect();
    let id_of = |l: &str| labels.get(l).copied().ok_or_else(|| SimError::UnknownNode(l.to_string()));

    for (i, e) in s.events.iter().enumerate() {
        let at = e.time_ms * MS;
        // everything strictly before `at` has happened
        sim.run_until(at.saturating_sub(1));
        let req = RequestId(i as u64);
        let client = |sim: &Simulation, c: &Option<String>| lookup(sim, c.as_deref().unwrap_or(DEFAULT_CLIENT));
        match &e.kind {
            EventKind::Insert {
                label, via, client: c, ..
            } => {
                let obj = s.object(label).expect("validated label");
                let (cl, v) = (client(&sim, c)?, lookup(&sim, via)?);
                sim.submit_as(req, at, cl, v, ClientOp::Insert(obj))?;
            }
            EventKind::Search {
                via,
                criterion,
                mode,
                client: c,
            } => {
                let (cl, v) = (client(&sim, c)?, lookup(&sim, via)?);
                let op = ClientOp::Search {
                    criterion: criterion.clone(),
                    mode: *mode,
                };
                sim.submit_as(req, at, cl, v, op)?;
            }
            EventKind::Update {
                label,
                via,
                payload,
                client: c,
            } => {
                let (cl, v) = (client(&sim, c)?, lookup(&sim, via)?);
                let op = ClientOp::Update {
                    id: id_of(label)?,
                    payload: payload.as_bytes().to_vec(),
                };
                sim.submit_as(req, at, cl, v, op)?;
            }
            EventKind::Read { label, client: c } => {
                let id = id_of(label)?;
                // the client reads straight from the holder a first-match
                // search taught it, so no Agent relays
                let cl = client(&sim, c)?;
                sim.submit_as(req, at, cl, cl, ClientOp::Read { id })?;
            }
            EventKind::Crash { node } => {
                let id = lookup(&sim, node)?;
                sim.schedule_crash(at, id)?;
            }
            EventKind::CrashHolders { label, gap_ms } => {
                sim.schedule_crash_holders(at, id_of(label)?, gap_ms * MS);
            }
            EventKind::Rejoin { node } => {
                let id = lookup(&sim, node)?;
                sim.schedule_rejoin(at, id)?;
            }
            EventKind::Join { .. } => {}
        }
    }
    let end = sim.run();
    let expected_lost: BTreeSet<ObjectId> = s
        .config
        .expect_lost
        .iter()
        .filter_map(|l| labels.get(l).copied())
        .collect();
    let violations = sim.check(&expected_lost);
    Ok(Outcome {
        sim,
        labels,
        expected_lost,
        violations,
        end,
    })
}

fn lookup(sim: &Simulation, name: &str) -> Result<NodeId, SimError> {
    sim.current(name).ok_or_else(|| SimError::UnknownNode(name.to_string()))
}
