//! Global invariants checked once a run has settled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::Simulation;
use crate::membership::REPLICATION;
use crate::node::PeerState;
use crate::types::{NodeId, ObjectId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

struct Checker<'a> {
    sim: &'a Simulation,
    out: Vec<Violation>,
}

impl Checker<'_> {
    fn fail(&mut self, kind: &'static str, detail: String) {
        self.out.push(Violation { kind, detail });
    }

    fn n(&self, id: NodeId) -> &str {
        self.sim.name(id)
    }
}

pub fn check(sim: &Simulation, expected_lost: &BTreeSet<ObjectId>) -> Vec<Violation> {
    let mut c = Checker { sim, out: Vec::new() };
    let ragents = sim.live_ragents();
    let agents = sim.live_agents();
    let ragent_set: BTreeSet<NodeId> = ragents.iter().copied().collect();
    let t = sim.config().thresholds;
    let total_agents = agents.len();
    let heartbeats = sim.config().heartbeat.enabled();

    let mut cluster_of_agent: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut cluster_of_object: BTreeMap<ObjectId, Vec<NodeId>> = BTreeMap::new();
    // (agent, object) pairs some catalogue expects to exist
    let mut listed: BTreeSet<(NodeId, ObjectId)> = BTreeSet::new();

    for &r in &ragents {
        let ra = sim.peer(r).and_then(|p| p.ragent.as_ref()).expect("live RAgent");
        let cl = &ra.cluster;
        let rn = c.n(r).to_string();
        if cl.ragent != r {
            c.fail("ragent-id", format!("{rn} believes it heads {}", c.n(cl.ragent)));
        }
        if !sim.peer(r).expect("peer").store.is_empty() {
            c.fail("ragent-store", format!("{rn} stores replicas"));
        }
        for &m in &cl.members {
            cluster_of_agent.entry(m).or_default().push(r);
            if !sim.is_alive(m) {
                c.fail("dead-member", format!("{rn} lists crashed {}", c.n(m)));
                continue;
            }
            match sim.peer(m) {
                Some(p) if !p.is_ragent() => {
                    // member lists travel with heartbeats; without them only
                    // the RAgent id has to be current
                    let ok = p
                        .view
                        .as_ref()
                        .is_some_and(|v| v.ragent == r && (!heartbeats || v.members == cl.members));
                    if !ok {
                        c.fail("stale-view", format!("{} has a view differing from {rn}", c.n(m)));
                    }
                }
                _ => c.fail("member-role", format!("{rn} lists {} which is not a plain Agent", c.n(m))),
            }
        }

        // holder lists and replicas
        let mut ground: BTreeMap<NodeId, u64> = cl.members.iter().map(|m| (*m, 0)).collect();
        for e in cl.catalogue.entries() {
            let id = e.meta.id;
            cluster_of_object.entry(id).or_default().push(r);
            let holders: Vec<NodeId> = e.holders.iter().collect();
            let want = if cl.members.len() >= REPLICATION { REPLICATION } else { 1 };
            if holders.len() != want {
                c.fail("holder-count", format!("{id} has {} holders in {rn}", holders.len()));
            }
            let mut payload: Option<&[u8]> = None;
            let mut histories: Vec<&Vec<(u64, u64)>> = Vec::new();
            for h in &holders {
                listed.insert((*h, id));
                *ground.entry(*h).or_default() += 1;
                if !cl.members.contains(h) {
                    c.fail("holder-not-member", format!("{id} held by non-member {}", c.n(*h)));
                }
                let Some(rep) = sim.peer(*h).filter(|_| sim.is_alive(*h)).and_then(|p| p.store.get(&id)) else {
                    c.fail("missing-replica", format!("{} lacks {id}", c.n(*h)));
                    continue;
                };
                if rep.obj.version != e.version {
                    c.fail(
                        "replica-version",
                        format!("{} has {id} at v{} but catalogue says v{}", c.n(*h), rep.obj.version, e.version),
                    );
                }
                match payload {
                    None => payload = Some(&rep.obj.payload),
                    Some(p) if p != rep.obj.payload.as_slice() => {
                        c.fail("replica-payload", format!("replicas of {id} differ"));
                    }
                    _ => {}
                }
                histories.push(&rep.history);
            }
            if !histories_agree(&histories) {
                c.fail("history", format!("replica histories of {id} disagree"));
            }
        }
        for (m, want) in &ground {
            if cl.loads.get(*m) != Some(*want) {
                c.fail(
                    "load",
                    format!("{rn} load of {} is {:?}, holds {want}", c.n(*m), cl.loads.get(*m)),
                );
            }
        }
        if cl.loads.len() != cl.members.len() {
            c.fail("load", format!("{rn} load table does not match membership"));
        }
        if !cl.in_transit.is_empty() {
            c.fail("in-transit", format!("{rn} has {} unconfirmed copies", cl.in_transit.len()));
        }

        // secondary and its backup
        match cl.secondary {
            Some(s) => {
                if !cl.members.contains(&s) {
                    c.fail("secondary", format!("{rn} secondary {} is not a member", c.n(s)));
                } else {
                    let b = sim.peer(s).and_then(|p| p.backup.as_ref());
                    match b {
                        Some(b) if b.catalogue == cl.catalogue && b.members == cl.members => {}
                        _ => c.fail("backup", format!("{} backup differs from {rn}", c.n(s))),
                    }
                }
            }
            None if !cl.members.is_empty() => c.fail("secondary", format!("{rn} has members but no secondary")),
            None => {}
        }

        // peer graph
        let others: BTreeSet<NodeId> = ragent_set.iter().copied().filter(|x| *x != r).collect();
        if cl.peers != others {
            c.fail("peers", format!("{rn} peer set is incomplete or stale"));
        }

        // cluster size
        let size = cl.members.len();
        if size > t.max_cluster {
            c.fail("cluster-size", format!("{rn} has {size} members, above {}", t.max_cluster));
        }
        if size < t.min_cluster && ra.shrunk && !others.is_empty() && total_agents >= 2 * t.min_cluster {
            c.fail("cluster-size", format!("{rn} shrank to {size} members, below {}", t.min_cluster));
        }
    }

    for (id, cls) in &cluster_of_object {
        if cls.len() > 1 {
            c.fail("object-clusters", format!("{id} catalogued by {} clusters", cls.len()));
        }
    }

    for &a in &agents {
        let p: &PeerState = sim.peer(a).expect("peer");
        // an Agent whose join is still scheduled belongs nowhere yet
        let dormant = p.view.is_none() && !p.join.active && p.join.attempts == 0 && p.store.is_empty();
        if dormant {
            continue;
        }
        match cluster_of_agent.get(&a).map(Vec::len) {
            Some(1) => {}
            Some(k) => c.fail("agent-clusters", format!("{} is in {k} clusters", c.n(a))),
            None => c.fail("agent-clusters", format!("{} is in no cluster", c.n(a))),
        }
        for id in p.store.keys() {
            if !listed.contains(&(a, *id)) {
                c.fail("stray-replica", format!("{} keeps unlisted {id}", c.n(a)));
            }
        }
    }

    // lookup services agree with each other and with reality
    let lus: Vec<NodeId> = sim.lus_nodes().into_iter().filter(|l| sim.is_alive(*l)).collect();
    let mut first = None;
    for l in lus {
        let reg = &sim.slot(l).and_then(|s| s.node.as_lus()).expect("lus").registry;
        let live: BTreeSet<NodeId> = reg.live().into_iter().map(|(r, _)| r).collect();
        if live != ragent_set {
            c.fail("lus-registry", format!("{} lists a different RAgent set", c.n(l)));
        }
        match &first {
            None => first = Some(reg.clone()),
            Some(f) if f.live() != reg.live() => {
                c.fail("lus-divergence", format!("{} differs from its siblings", c.n(l)))
            }
            _ => {}
        }
    }

    // operations
    for op in sim.ops().values() {
        if op.completed.is_none() && sim.is_alive(op.agent) && sim.is_alive(op.client) {
            c.fail("incomplete-op", format!("request {} ({}) never completed", op.req, op.op.kind()));
        }
    }
    for id in sim.lost_objects() {
        if !expected_lost.contains(&id) {
            c.fail("unexpected-loss", format!("{id} was lost"));
        }
    }
    c.out
}

/// Replica histories agree on the digest of every version they share.
fn histories_agree(hs: &[&Vec<(u64, u64)>]) -> bool {
    let mut seen: BTreeMap<u64, u64> = BTreeMap::new();
    for h in hs {
        for (v, d) in h.iter() {
            if *seen.entry(*v).or_insert(*d) != *d {
                return false;
            }
        }
    }
    true
}
