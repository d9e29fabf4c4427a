#![allow(dead_code)]

use std::collections::BTreeSet;

use disthash::membership::{HeartbeatConfig, Thresholds};
use disthash::protocol::{ClientOp, Reply, RequestId};
use disthash::sim::{SimConfig, SimTime, Simulation, MS};
use disthash::types::{DistObject, LocalityDescriptor, NodeId, ObjectId, PatternKey, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TYPES: [&str; 4] = ["Sensor", "Camera", "Doc", "Log"];
pub const PATTERNS: usize = 12;

/// Locality of cluster `i`: every cluster sits in its own network, AS and
/// country so joining Agents pick their own RAgent.
pub fn site(i: usize) -> LocalityDescriptor {
    LocalityDescriptor::new(format!("net{i}"), format!("as{i}"), format!("c{i}"), "eu").unwrap()
}

pub fn config(seed: u64, min: usize, max: usize) -> SimConfig {
    SimConfig {
        seed,
        thresholds: Thresholds::new(min, max).unwrap(),
        ..SimConfig::default()
    }
}

pub fn with_heartbeat(mut cfg: SimConfig, period_ms: u64) -> SimConfig {
    cfg.heartbeat = HeartbeatConfig {
        period: period_ms * MS,
        failure_timeout: 3 * period_ms * MS,
    };
    cfg
}

pub struct World {
    pub sim: Simulation,
    pub ragents: Vec<NodeId>,
    /// Agents declared at each RAgent's site.
    pub agents: Vec<Vec<NodeId>>,
    pub client: NodeId,
}

impl World {
    /// One RAgent per entry of `sizes`, with that many Agents at its site.
    /// Runs until every Agent has joined.
    pub fn build(cfg: SimConfig, sizes: &[usize]) -> World {
        let mut sim = Simulation::new(cfg);
        let ragents: Vec<NodeId> = (0..sizes.len())
            .map(|i| sim.add_node(&format!("r{i}"), Role::RAgent, site(i)).unwrap())
            .collect();
        let agents: Vec<Vec<NodeId>> = sizes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (0..*n)
                    .map(|j| sim.add_node(&format!("a{i}_{j}"), Role::Agent, site(i)).unwrap())
                    .collect()
            })
            .collect();
        let client = sim.add_node("c0", Role::Client, site(0)).unwrap();
        sim.start();
        let settle = 2 * sim.config().bootstrap + 500 * MS;
        sim.run_until(settle);
        World {
            sim,
            ragents,
            agents,
            client,
        }
    }

    pub fn all_agents(&self) -> Vec<NodeId> {
        self.agents.iter().flatten().copied().collect()
    }

    pub fn submit(&mut self, at: SimTime, via: NodeId, op: ClientOp) -> RequestId {
        self.sim.submit(at, self.client, via, op).unwrap()
    }

    pub fn insert(&mut self, at: SimTime, via: NodeId, obj: DistObject) -> RequestId {
        self.submit(at, via, ClientOp::Insert(obj))
    }

    pub fn settle(&mut self, extra: SimTime) {
        let t = self.sim.now() + extra;
        self.sim.run_until(t);
    }

    pub fn reply(&self, req: RequestId) -> Option<&Reply> {
        self.sim.op(req).and_then(|o| o.reply.as_ref())
    }
}

pub fn random_object(rng: &mut ChaCha8Rng, n: usize) -> DistObject {
    let ty = TYPES[rng.random_range(0..TYPES.len())];
    let k = rng.random_range(0..=3);
    let keys: Vec<String> = (0..k).map(|_| format!("p{}", rng.random_range(0..PATTERNS))).collect();
    DistObject::new(ty, keys, format!("payload-{n}").into_bytes())
}

pub fn random_criterion(rng: &mut ChaCha8Rng) -> PatternKey {
    if rng.random_bool(0.5) {
        PatternKey::exact(TYPES[rng.random_range(0..TYPES.len())])
    } else {
        PatternKey::pattern(format!("p{}", rng.random_range(0..PATTERNS)))
    }
}

/// Ids of every replica on a live peer that matches `criterion`.
pub fn brute_force(sim: &Simulation, criterion: &PatternKey) -> BTreeSet<ObjectId> {
    sim.slots()
        .iter()
        .filter(|s| s.alive)
        .filter_map(|s| s.node.as_peer())
        .flat_map(|p| p.store.values())
        .filter(|r| r.obj.matches(criterion))
        .map(|r| r.obj.id)
        .collect()
}

/// A randomized multi-cluster world with every insert completed and a
/// batch of `search` operations submitted and finished.
pub struct RandomRun {
    pub world: World,
    pub inserts: Vec<RequestId>,
    pub searches: Vec<(RequestId, PatternKey)>,
    /// Brute-force answer per search taken once inserts settled.
    pub expected: Vec<BTreeSet<ObjectId>>,
}

pub fn random_run(seed: u64) -> RandomRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(2..=8);
    let sizes: Vec<usize> = (0..r).map(|_| rng.random_range(4..=32)).collect();
    let b = rng.random_range(50..=512);
    let mut world = World::build(config(seed, 2, 64), &sizes);
    let agents = world.all_agents();
    let t0 = world.sim.now();
    let mut inserts = Vec::new();
    for n in 0..b {
        let obj = random_object(&mut rng, n);
        let via = agents[rng.random_range(0..agents.len())];
        inserts.push(world.insert(t0 + n as u64 * MS, via, obj));
    }
    world.settle(b as u64 * MS + 2_000 * MS);
    let t1 = world.sim.now();
    let mut searches = Vec::new();
    let mut expected = Vec::new();
    for i in 0..10 {
        let c = random_criterion(&mut rng);
        let via = agents[rng.random_range(0..agents.len())];
        expected.push(brute_force(&world.sim, &c));
        let req = world.submit(
            t1 + i * 5 * MS,
            via,
            ClientOp::Search {
                criterion: c.clone(),
                mode: disthash::dataops::SearchMode::All,
            },
        );
        searches.push((req, c));
    }
    world.sim.run();
    RandomRun {
        world,
        inserts,
        searches,
        expected,
    }
}
