//! Deterministic discrete-event simulator.
//!
//! Events are ordered by (time, sequence number); the sequence number is
//! assigned at scheduling time, so two runs with the same inputs process the
//! same events in the same order. Nothing here reads a clock or an OS RNG.

pub mod accounting;
pub mod invariants;
pub mod network;
pub mod trace;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::lus::LusState;
use crate::membership::{HeartbeatConfig, Thresholds};
use crate::node::{ClientState, Node, PeerState};
use crate::protocol::{ClientOp, Ctx, Detail, Effect, Envelope, MemberKind, NodeEnv, Outbox, Reply, RequestId, Timer};
use crate::types::{LocalityDescriptor, NodeId, ObjectId, Role};

pub use accounting::StepCounter;
pub use invariants::Violation;
pub use network::LatencyModel;
pub use trace::{MessageStats, Trace};

/// Simulated time in microseconds.
pub type SimTime = u64;

pub const MS: SimTime = 1_000;

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub thresholds: Thresholds,
    pub heartbeat: HeartbeatConfig,
    pub latency: LatencyModel,
    pub delegation_factor: f64,
    /// Catalogue size below which an RAgent never delegates.
    pub delegation_floor: usize,
    pub migration_threshold: u32,
    /// Lookup services created when none is declared.
    pub lus_count: usize,
    /// Delay before declared RAgents look each other up; Agents join at
    /// twice this.
    pub bootstrap: SimTime,
    /// Time run after the last scheduled event; `None` picks a default.
    pub drain: Option<SimTime>,
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            thresholds: Thresholds::default(),
            heartbeat: HeartbeatConfig {
                period: 0,
                failure_timeout: 0,
            },
            latency: LatencyModel::default(),
            delegation_factor: 2.0,
            delegation_floor: 16,
            migration_threshold: 3,
            lus_count: 2,
            bootstrap: 200 * MS,
            drain: None,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} is not crashed")]
    NotCrashed(String),
    #[error("node name {0} declared twice")]
    DuplicateName(String),
    #[error("{0} is not an Agent")]
    NotAnAgent(String),
}

#[derive(Clone, Debug)]
enum Event {
    Deliver(Envelope),
    Bounce(Envelope),
    Timer(NodeId, Timer),
    Crash(NodeId),
    CrashHolders { id: ObjectId, gap: SimTime },
    Rejoin(NodeId),
    Submit {
        client: NodeId,
        req: RequestId,
        agent: NodeId,
        op: ClientOp,
    },
}

struct Queued {
    time: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Queued {
    // Reversed: BinaryHeap pops the earliest event first.
    fn cmp(&self, o: &Self) -> Ordering {
        (o.time, o.seq).cmp(&(self.time, self.seq))
    }
}

/// One incarnation of a node.
#[derive(Clone, Debug)]
pub struct Slot {
    pub name: String,
    pub role: Role,
    pub phys: usize,
    pub alive: bool,
    pub node: Node,
    pub env: NodeEnv,
    join_scheduled: bool,
}

#[derive(Clone, Debug)]
struct Phys {
    name: String,
    incarnations: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub req: RequestId,
    pub op: ClientOp,
    pub client: NodeId,
    pub agent: NodeId,
    pub submitted: SimTime,
    pub completed: Option<SimTime>,
    pub reply: Option<Reply>,
    /// Versions announced while the operation waited.
    pub progress: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberRecord {
    pub time: SimTime,
    pub kind: MemberKind,
    pub cluster: NodeId,
    pub node: NodeId,
    pub detail: Vec<(&'static str, Detail)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntriesRecord {
    pub time: SimTime,
    pub kind: MemberKind,
    pub cluster: NodeId,
    pub before: usize,
    pub parts: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossRecord {
    pub time: SimTime,
    pub id: ObjectId,
    pub cluster: NodeId,
}

pub struct Simulation {
    config: SimConfig,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Queued>,
    slots: Vec<Slot>,
    phys: Vec<Phys>,
    names: BTreeMap<String, NodeId>,
    started: bool,
    /// Time of the last externally scheduled event.
    last_external: SimTime,
    next_req: u64,
    events_processed: u64,
    steps: StepCounter,
    stats: MessageStats,
    trace: Trace,
    ops: BTreeMap<RequestId, OpRecord>,
    members: Vec<MemberRecord>,
    entries: Vec<EntriesRecord>,
    losses: Vec<LossRecord>,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Self {
        let trace = Trace::new(config.trace);
        Self {
            config,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            slots: Vec::new(),
            phys: Vec::new(),
            names: BTreeMap::new(),
            started: false,
            last_external: 0,
            next_req: 1,
            events_processed: 0,
            steps: StepCounter::new(),
            stats: MessageStats::default(),
            trace,
            ops: BTreeMap::new(),
            members: Vec::new(),
            entries: Vec::new(),
            losses: Vec::new(),
        }
    }

    // ---- building ----

    /// Declares a node. Must be called before the first event runs.
    pub fn add_node(
        &mut self,
        name: &str,
        role: Role,
        locality: LocalityDescriptor,
    ) -> Result<NodeId, SimError> {
        if self.names.contains_key(name) {
            return Err(SimError::DuplicateName(name.to_string()));
        }
        let id = NodeId(self.slots.len() as u32);
        let node = match role {
            Role::RAgent => Node::Peer(Box::new(PeerState::new_ragent(
                id,
                self.config.migration_threshold,
            ))),
            Role::Agent => Node::Peer(Box::default()),
            Role::Lus => Node::Lus(LusState::new(Vec::new())),
            Role::Client => Node::Client(ClientState::default()),
        };
        self.phys.push(Phys {
            name: name.to_string(),
            incarnations: vec![id],
        });
        self.slots.push(Slot {
            name: name.to_string(),
            role,
            phys: self.phys.len() - 1,
            alive: true,
            node,
            env: NodeEnv {
                locality,
                nearest_lus: id,
                lus: Vec::new(),
            },
            join_scheduled: false,
        });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Creates default lookup services and a client if none were declared,
    /// wires every node to its nearest lookup service and arms the start-up
    /// timers. Runs implicitly before the first event.
    pub fn start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        let first_loc = self
            .slots
            .iter()
            .find(|s| s.role == Role::RAgent)
            .or(self.slots.first())
            .map(|s| s.env.locality.clone())
            .unwrap_or_else(|| LocalityDescriptor::new("net", "as", "country", "continent").expect("non-empty"));
        if !self.slots.iter().any(|s| s.role == Role::Lus) {
            let ragent_locs: Vec<LocalityDescriptor> = self
                .slots
                .iter()
                .filter(|s| s.role == Role::RAgent)
                .map(|s| s.env.locality.clone())
                .collect();
            for i in 0..self.config.lus_count.max(1) {
                let loc = ragent_locs
                    .get(i % ragent_locs.len().max(1))
                    .cloned()
                    .unwrap_or_else(|| first_loc.clone());
                self.add_node(&format!("lus{i}"), Role::Lus, loc).expect("fresh name");
            }
        }
        if !self.slots.iter().any(|s| s.role == Role::Client) && !self.names.contains_key("c0") {
            self.add_node("c0", Role::Client, first_loc).expect("fresh name");
        }
        let lus: Vec<NodeId> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == Role::Lus)
            .map(|(i, _)| NodeId(i as u32))
            .collect();
        for i in 0..self.slots.len() {
            let loc = self.slots[i].env.locality.clone();
            let nearest = *lus
                .iter()
                .max_by_key(|l| {
                    (
                        crate::types::proximity_rank(&loc, &self.slots[l.0 as usize].env.locality),
                        std::cmp::Reverse(**l),
                    )
                })
                .expect("at least one lookup service");
            let slot = &mut self.slots[i];
            slot.env.nearest_lus = nearest;
            slot.env.lus = lus.clone();
            if let Node::Lus(l) = &mut slot.node {
                l.siblings = lus.iter().copied().filter(|x| x.0 as usize != i).collect();
            }
        }
        let hb = self.config.heartbeat;
        let bootstrap = self.config.bootstrap;
        for i in 0..self.slots.len() {
            let id = NodeId(i as u32);
            match self.slots[i].role {
                Role::RAgent => {
                    self.run_handler(i, 0, None, |node, ctx| {
                        if let Node::Peer(p) = node {
                            p.lus_register(ctx);
                        }
                    });
                    self.schedule(bootstrap, Event::Timer(id, Timer::Bootstrap));
                    if hb.enabled() {
                        self.schedule(hb.period, Event::Timer(id, Timer::Tick));
                    }
                }
                Role::Agent => {
                    if !self.slots[i].join_scheduled {
                        self.schedule(2 * bootstrap, Event::Timer(id, Timer::Join));
                    }
                    if hb.enabled() {
                        self.schedule(hb.period, Event::Timer(id, Timer::Tick));
                    }
                }
                _ => {}
            }
        }
    }

    fn schedule(&mut self, time: SimTime, event: Event) {
        self.seq += 1;
        self.queue.push(Queued {
            time,
            seq: self.seq,
            event,
        });
    }

    fn external(&mut self, at: SimTime, event: Event) {
        let at = at.max(self.now);
        self.last_external = self.last_external.max(at);
        self.schedule(at, event);
    }

    fn check_id(&self, id: NodeId) -> Result<(), SimError> {
        if (id.0 as usize) < self.slots.len() {
            Ok(())
        } else {
            Err(SimError::UnknownNode(id.to_string()))
        }
    }

    /// Schedules a client operation; `client` hands it to `agent`.
    pub fn submit_as(
        &mut self,
        req: RequestId,
        at: SimTime,
        client: NodeId,
        agent: NodeId,
        op: ClientOp,
    ) -> Result<RequestId, SimError> {
        self.check_id(client)?;
        self.check_id(agent)?;
        self.next_req = self.next_req.max(req.0 + 1);
        self.external(
            at,
            Event::Submit {
                client,
                req,
                agent,
                op,
            },
        );
        Ok(req)
    }

    pub fn submit(
        &mut self,
        at: SimTime,
        client: NodeId,
        agent: NodeId,
        op: ClientOp,
    ) -> Result<RequestId, SimError> {
        let req = RequestId(self.next_req);
        self.submit_as(req, at, client, agent, op)
    }

    pub fn schedule_crash(&mut self, at: SimTime, node: NodeId) -> Result<(), SimError> {
        self.check_id(node)?;
        self.external(at, Event::Crash(node));
        Ok(())
    }

    /// Crashes the holders of `id` as known at time `at`: the owner first,
    /// the second holder `gap` later.
    pub fn schedule_crash_holders(&mut self, at: SimTime, id: ObjectId, gap: SimTime) {
        self.last_external = self.last_external.max(at + gap);
        self.external(at, Event::CrashHolders { id, gap });
    }

    pub fn schedule_rejoin(&mut self, at: SimTime, node: NodeId) -> Result<(), SimError> {
        self.check_id(node)?;
        self.external(at, Event::Rejoin(node));
        Ok(())
    }

    /// Starts an Agent's join at `at` instead of the default time.
    pub fn schedule_join(&mut self, at: SimTime, node: NodeId) -> Result<(), SimError> {
        self.check_id(node)?;
        let slot = &mut self.slots[node.0 as usize];
        if slot.role != Role::Agent {
            return Err(SimError::NotAnAgent(slot.name.clone()));
        }
        slot.join_scheduled = true;
        self.external(at, Event::Timer(node, Timer::Join));
        Ok(())
    }

    /// Crashes a node now. Crashing a dead node does nothing.
    pub fn inject_crash(&mut self, node: NodeId) -> Result<(), SimError> {
        self.check_id(node)?;
        let now = self.now;
        let slot = &mut self.slots[node.0 as usize];
        if slot.alive {
            slot.alive = false;
            let name = slot.name.clone();
            self.trace.push(now, self.seq, &name, "crash", "-");
        }
        Ok(())
    }

    /// Brings a crashed node back as a fresh incarnation with an empty
    /// store. Returns the new node's id.
    pub fn inject_rejoin(&mut self, node: NodeId) -> Result<NodeId, SimError> {
        self.check_id(node)?;
        let old = &self.slots[node.0 as usize];
        if old.alive {
            return Err(SimError::NotCrashed(old.name.clone()));
        }
        if old.node.as_peer().is_none() {
            return Err(SimError::NotAnAgent(old.name.clone()));
        }
        let previous_ragent = old
            .node
            .as_peer()
            .filter(|p| !p.is_ragent())
            .and_then(|p| p.view.as_ref().map(|v| v.ragent));
        let phys = old.phys;
        let env = old.env.clone();
        let id = NodeId(self.slots.len() as u32);
        let p = &mut self.phys[phys];
        let name = format!("{}.{}", p.name, p.incarnations.len());
        p.incarnations.push(id);
        self.slots.push(Slot {
            name: name.clone(),
            role: Role::Agent,
            phys,
            alive: true,
            node: Node::Peer(Box::new(PeerState::returning(node, previous_ragent))),
            env,
            join_scheduled: true,
        });
        self.names.insert(name.clone(), id);
        self.trace.push(self.now, self.seq, &name, "rejoin", "-");
        let now = self.now;
        self.schedule(now, Event::Timer(id, Timer::Join));
        let hb = self.config.heartbeat;
        if hb.enabled() {
            self.schedule(now + hb.period - now % hb.period, Event::Timer(id, Timer::Tick));
        }
        Ok(id)
    }

    // ---- running ----

    /// Processes the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        self.start();
        let Some(q) = self.queue.pop() else {
            return false;
        };
        self.now = q.time;
        self.events_processed += 1;
        let seq = q.seq;
        match q.event {
            Event::Deliver(env) => self.deliver(seq, env),
            Event::Bounce(env) => {
                let i = env.src.0 as usize;
                if self.slots[i].alive {
                    let name = self.slots[i].name.clone();
                    let kind = format!("bounce:{}", env.msg.kind());
                    if self.trace.enabled() {
                        let d = trace::message_digest(&env.msg);
                        self.trace.push(self.now, seq, &name, &kind, &d);
                    }
                    let (hop, req) = (env.hop, env.req);
                    self.run_handler(i, hop, req, |node, ctx| node.on_bounce(ctx, env));
                }
            }
            Event::Timer(id, timer) => {
                let i = id.0 as usize;
                if self.slots[i].alive {
                    let name = self.slots[i].name.clone();
                    self.trace.push(self.now, seq, &name, timer.as_str(), "-");
                    self.run_handler(i, 0, None, |node, ctx| node.on_timer(ctx, timer));
                }
            }
            Event::Crash(id) => {
                let _ = self.inject_crash(id);
            }
            Event::CrashHolders { id, gap } => {
                if let Some(holders) = self.holders_of(id) {
                    if let Some(first) = holders.first() {
                        let _ = self.inject_crash(*first);
                    }
                    if let Some(second) = holders.get(1) {
                        let at = self.now + gap;
                        self.schedule(at, Event::Crash(*second));
                    }
                }
            }
            Event::Rejoin(id) => {
                let _ = self.inject_rejoin(id);
            }
            Event::Submit {
                client,
                req,
                agent,
                op,
            } => {
                self.ops.insert(
                    req,
                    OpRecord {
                        req,
                        op: op.clone(),
                        client,
                        agent,
                        submitted: self.now,
                        completed: None,
                        reply: None,
                        progress: Vec::new(),
                    },
                );
                let i = client.0 as usize;
                if self.slots[i].alive {
                    self.run_handler(i, 0, Some(req), |node, ctx| {
                        if let Node::Client(c) = node {
                            c.start(ctx, req, agent, op);
                        }
                    });
                }
            }
        }
        true
    }

    fn deliver(&mut self, seq: u64, env: Envelope) {
        let d = env.dst.0 as usize;
        if !self.slots[d].alive {
            if env.msg.is_datagram() {
                self.stats.dropped += 1;
            } else {
                self.stats.bounced += 1;
                let back = self.latency(d, env.src.0 as usize);
                self.schedule(self.now + back, Event::Bounce(env));
            }
            return;
        }
        self.stats.record(&env.msg, env.req, env.hop);
        if self.trace.enabled() {
            let name = self.slots[d].name.clone();
            let digest = trace::message_digest(&env.msg);
            self.trace.push(self.now, seq, &name, env.msg.kind(), &digest);
        }
        let (hop, req) = (env.hop, env.req);
        self.run_handler(d, hop, req, |node, ctx| node.on_message(ctx, env));
    }

    fn latency(&self, a: usize, b: usize) -> SimTime {
        let (sa, sb) = (&self.slots[a], &self.slots[b]);
        self.config.latency.delay(
            self.config.seed,
            sa.phys,
            sb.phys,
            &sa.env.locality,
            &sb.env.locality,
        )
    }

    fn run_handler<F>(&mut self, i: usize, hop: u32, req: Option<RequestId>, f: F)
    where
        F: FnOnce(&mut Node, &mut Ctx),
    {
        let slot = &mut self.slots[i];
        let mut ctx = Ctx::new(self.now, NodeId(i as u32), &self.config, &slot.env, hop, req);
        f(&mut slot.node, &mut ctx);
        let out = ctx.out;
        self.apply(i, out);
    }

    fn apply(&mut self, i: usize, out: Outbox) {
        let src = NodeId(i as u32);
        let role = self.slots[i].role;
        for s in out.sends {
            let d = s.dst.0 as usize;
            if d >= self.slots.len() {
                continue;
            }
            let at = self.now + self.latency(i, d);
            self.schedule(
                at,
                Event::Deliver(Envelope {
                    src,
                    dst: s.dst,
                    src_role: role,
                    hop: s.hop,
                    req: s.req,
                    msg: s.msg,
                }),
            );
        }
        for (delay, t) in out.timers {
            self.schedule(self.now + delay, Event::Timer(src, t));
        }
        for e in out.effects {
            self.record_effect(e);
        }
    }

    fn record_effect(&mut self, e: Effect) {
        let now = self.now;
        match e {
            Effect::Step { req, ragent, event } => {
                self.steps.record(req, ragent, &event);
                if self.trace.enabled() {
                    let name = self.slots[ragent.0 as usize].name.clone();
                    self.trace.push(now, self.seq, &name, "step", &format!("{event:?}").replace(' ', ""));
                }
            }
            Effect::Member {
                kind,
                cluster,
                node,
                detail,
            } => self.members.push(MemberRecord {
                time: now,
                kind,
                cluster,
                node,
                detail,
            }),
            Effect::Entries {
                kind,
                cluster,
                before,
                parts,
            } => self.entries.push(EntriesRecord {
                time: now,
                kind,
                cluster,
                before,
                parts,
            }),
            Effect::Lost { id, cluster } => self.losses.push(LossRecord {
                time: now,
                id,
                cluster,
            }),
            Effect::Completed { req, reply } => {
                if let Some(op) = self.ops.get_mut(&req) {
                    if op.completed.is_none() {
                        op.completed = Some(now);
                        op.reply = Some(reply);
                    }
                }
            }
            Effect::Progress { req, version } => {
                if let Some(op) = self.ops.get_mut(&req) {
                    op.progress.push(version);
                }
            }
        }
    }

    /// Processes every event scheduled at or before `t`.
    pub fn run_until(&mut self, t: SimTime) {
        self.start();
        while self.queue.peek().is_some_and(|q| q.time <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    /// Runs past the last scheduled event until the system settles: for a
    /// fixed window when heartbeats run, else until nothing is left.
    /// Returns the end time.
    pub fn run(&mut self) -> SimTime {
        self.start();
        let hb = self.config.heartbeat;
        match (self.config.drain, hb.enabled()) {
            (Some(d), _) => self.run_until(self.last_external + d),
            (None, true) => {
                let window = (10 * hb.failure_timeout).max(2_000 * MS);
                self.run_until(self.last_external + window);
            }
            (None, false) => while self.step() {},
        }
        self.now
    }

    // ---- inspection ----

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, id: NodeId) -> Option<&Slot> {
        self.slots.get(id.0 as usize)
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Latest incarnation of the node declared as `name`.
    pub fn current(&self, name: &str) -> Option<NodeId> {
        let first = self.node_id(name)?;
        let phys = &self.phys[self.slots[first.0 as usize].phys];
        phys.incarnations.last().copied()
    }

    pub fn name(&self, id: NodeId) -> &str {
        self.slots.get(id.0 as usize).map_or("?", |s| s.name.as_str())
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.slots.get(id.0 as usize).is_some_and(|s| s.alive)
    }

    pub fn peer(&self, id: NodeId) -> Option<&PeerState> {
        self.slots.get(id.0 as usize).and_then(|s| s.node.as_peer())
    }

    /// Live nodes currently acting as RAgent.
    pub fn live_ragents(&self) -> Vec<NodeId> {
        self.live_peers().into_iter().filter(|id| self.peer(*id).is_some_and(PeerState::is_ragent)).collect()
    }

    /// Live Agents not acting as RAgent.
    pub fn live_agents(&self) -> Vec<NodeId> {
        self.live_peers().into_iter().filter(|id| self.peer(*id).is_some_and(|p| !p.is_ragent())).collect()
    }

    fn live_peers(&self) -> Vec<NodeId> {
        (0..self.slots.len())
            .filter(|i| self.slots[*i].alive && self.slots[*i].node.as_peer().is_some())
            .map(|i| NodeId(i as u32))
            .collect()
    }

    pub fn lus_nodes(&self) -> Vec<NodeId> {
        (0..self.slots.len())
            .filter(|i| self.slots[*i].role == Role::Lus)
            .map(|i| NodeId(i as u32))
            .collect()
    }

    /// Live RAgent whose catalogue lists `id`.
    pub fn cluster_of_object(&self, id: ObjectId) -> Option<NodeId> {
        self.live_ragents().into_iter().find(|r| {
            self.peer(*r)
                .and_then(|p| p.ragent.as_ref())
                .is_some_and(|ra| ra.cluster.catalogue.contains(id))
        })
    }

    /// Holders of `id`, owner first, as its live RAgent records them.
    pub fn holders_of(&self, id: ObjectId) -> Option<Vec<NodeId>> {
        let r = self.cluster_of_object(id)?;
        let ra = self.peer(r)?.ragent.as_ref()?;
        Some(ra.cluster.catalogue.holders_of(id).ok()?.iter().collect())
    }

    /// Every object id catalogued by a live RAgent.
    pub fn catalogued(&self) -> BTreeSet<ObjectId> {
        self.live_ragents()
            .into_iter()
            .filter_map(|r| self.peer(r)?.ragent.as_ref())
            .flat_map(|ra| ra.cluster.catalogue.ids().collect::<Vec<_>>())
            .collect()
    }

    pub fn ops(&self) -> &BTreeMap<RequestId, OpRecord> {
        &self.ops
    }

    pub fn op(&self, req: RequestId) -> Option<&OpRecord> {
        self.ops.get(&req)
    }

    pub fn steps(&self) -> &StepCounter {
        &self.steps
    }

    pub fn stats(&self) -> &MessageStats {
        &self.stats
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn member_log(&self) -> &[MemberRecord] {
        &self.members
    }

    pub fn entries_log(&self) -> &[EntriesRecord] {
        &self.entries
    }

    pub fn loss_log(&self) -> &[LossRecord] {
        &self.losses
    }

    /// Objects whose insert succeeded but that no live RAgent catalogues.
    pub fn lost_objects(&self) -> BTreeSet<ObjectId> {
        let present = self.catalogued();
        self.ops
            .values()
            .filter_map(|o| match &o.reply {
                Some(Reply::Inserted { id }) if !present.contains(id) => Some(*id),
                _ => None,
            })
            .collect()
    }

    /// End-of-run invariant check; `expected_lost` objects may be missing.
    pub fn check(&self, expected_lost: &BTreeSet<ObjectId>) -> Vec<Violation> {
        invariants::check(self, expected_lost)
    }
}
