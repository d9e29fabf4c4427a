//! Node state machines. A peer is an Agent that may currently act as the
//! RAgent of a cluster; lookup services and clients are separate roles.
//!
//! Handlers mutate local state and push messages, timers and observations
//! into the [`Ctx`] outbox; they never touch another node.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use sha2::{Digest, Sha256};

use crate::dataops::{DataError, HotCounter, LockTable, SearchMode};
use crate::lus::LusState;
use crate::membership::ClusterState;
use crate::protocol::{ClientOp, ClusterView, Ctx, Effect, Envelope, Message, Reply, RequestId, Route, Timer};
use crate::sim::SimTime;
use crate::types::{DistObject, NodeId, ObjectId, PatternKey};

/// Short digest of a payload, kept per version so histories from different
/// replicas can be compared.
pub fn payload_digest(payload: &[u8]) -> u64 {
    let d = Sha256::digest(payload);
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A locally stored copy with every (version, payload digest) it has held.
#[derive(Clone, Debug, PartialEq)]
pub struct Replica {
    pub obj: DistObject,
    pub history: Vec<(u64, u64)>,
}

impl Replica {
    pub fn new(obj: DistObject) -> Self {
        let history = vec![(obj.version, payload_digest(&obj.payload))];
        Self { obj, history }
    }

    /// Installs a strictly newer version.
    pub fn advance(&mut self, obj: DistObject) -> bool {
        if obj.version <= self.obj.version {
            return false;
        }
        self.history.push((obj.version, payload_digest(&obj.payload)));
        self.obj = obj;
        true
    }
}

/// A client operation this Agent is carrying.
#[derive(Clone, Debug, PartialEq)]
pub struct Outstanding {
    pub client: NodeId,
    pub op: ClientOp,
    pub sent_to: Option<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JoinState {
    pub active: bool,
    /// RAgents that bounced or refused this join.
    pub excluded: BTreeSet<NodeId>,
    /// RAgent the pending join was sent to.
    pub target: Option<NodeId>,
    pub attempts: u32,
    /// Previous incarnation, sent along so its RAgent can clean up.
    pub previous: Option<NodeId>,
    /// RAgent of the previous incarnation, told once that it left.
    pub previous_ragent: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchJob {
    pub req: RequestId,
    pub route: Route,
    pub criterion: PatternKey,
    pub mode: SearchMode,
    /// First mode: local matches not tried yet, in id order.
    pub candidates: VecDeque<ObjectId>,
    pub found: BTreeMap<ObjectId, (DistObject, NodeId)>,
    /// Outstanding fetches per holder.
    pub pending: BTreeMap<NodeId, BTreeSet<ObjectId>>,
    pub tried: BTreeMap<ObjectId, BTreeSet<NodeId>>,
    /// Peers whose reply is still awaited.
    pub peers: BTreeSet<NodeId>,
    pub fan_out: bool,
    pub fanned: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MigrateJob {
    pub id: ObjectId,
    pub requester: NodeId,
    pub req: RequestId,
    pub pending: Option<NodeId>,
    pub tried: BTreeSet<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Job {
    Search(SearchJob),
    Migrate(MigrateJob),
}

/// An operation handed to a peer RAgent; its answer is relayed back.
#[derive(Clone, Debug, PartialEq)]
pub enum Relay {
    /// `route` is `None` for objects handed back after a failed migration.
    Insert {
        route: Option<Route>,
        obj: DistObject,
        target: NodeId,
    },
    Update {
        route: Route,
        id: ObjectId,
        awaiting: BTreeSet<NodeId>,
        claimed: Option<NodeId>,
    },
}

/// A hot object this cluster asked a peer to hand over.
#[derive(Clone, Debug, PartialEq)]
pub struct Migration {
    pub source: NodeId,
    pub retried: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reconfig {
    Idle,
    SplitWanted,
    MergeWanted,
    MergeQuerying,
    MergeRequested(NodeId),
    MergeAccepted(NodeId),
}

/// State held only while a peer acts as RAgent.
#[derive(Clone, Debug, PartialEq)]
pub struct RAgentState {
    pub cluster: ClusterState,
    pub last_seen: BTreeMap<NodeId, SimTime>,
    pub peer_seen: BTreeMap<NodeId, SimTime>,
    /// Catalogue sizes last reported by peers.
    pub peer_sizes: BTreeMap<NodeId, usize>,
    pub locks: LockTable,
    pub hot: HotCounter,
    pub jobs: BTreeMap<u64, Job>,
    pub next_job: u64,
    pub relays: BTreeMap<RequestId, Relay>,
    pub migrations: BTreeMap<ObjectId, Migration>,
    pub reconfig: Reconfig,
    pub absorbing: BTreeSet<NodeId>,
    /// Client requests and joins held back during a reconfiguration.
    pub deferred: VecDeque<(NodeId, Message)>,
    /// Node currently holding this RAgent's backup snapshot.
    pub backup_holder: Option<NodeId>,
    /// Set once the cluster has lost a member; enables merge checks.
    pub shrunk: bool,
    pub next_internal: u32,
}

impl RAgentState {
    pub fn new(cluster: ClusterState, migration_threshold: u32, now: SimTime) -> Self {
        let last_seen = cluster.members.iter().map(|m| (*m, now)).collect();
        let peer_seen = cluster.peers.iter().map(|p| (*p, now)).collect();
        Self {
            cluster,
            last_seen,
            peer_seen,
            peer_sizes: BTreeMap::new(),
            locks: LockTable::new(),
            hot: HotCounter::new(migration_threshold),
            jobs: BTreeMap::new(),
            next_job: 0,
            relays: BTreeMap::new(),
            migrations: BTreeMap::new(),
            reconfig: Reconfig::Idle,
            absorbing: BTreeSet::new(),
            deferred: VecDeque::new(),
            backup_holder: None,
            shrunk: false,
            next_internal: 0,
        }
    }

    /// In-flight work that a reconfiguration must wait for.
    pub fn busy(&self) -> bool {
        !self.jobs.is_empty()
            || !self.locks.is_empty()
            || !self.relays.is_empty()
            || !self.migrations.is_empty()
            || !self.cluster.in_transit.is_empty()
            || !self.absorbing.is_empty()
    }

    pub fn view(&self) -> ClusterView {
        ClusterView {
            ragent: self.cluster.ragent,
            secondary: self.cluster.secondary,
            members: self.cluster.members.clone(),
        }
    }

    pub fn add_job(&mut self, job: Job) -> u64 {
        let id = self.next_job;
        self.next_job += 1;
        self.jobs.insert(id, job);
        id
    }

    pub fn internal_request(&mut self, me: NodeId) -> RequestId {
        self.next_internal += 1;
        RequestId::internal(me, self.next_internal)
    }
}

/// An Agent, possibly acting as RAgent.
#[derive(Clone, Debug, PartialEq)]
pub struct PeerState {
    pub store: BTreeMap<ObjectId, Replica>,
    /// Last update applied per owned object, so a retried request is not
    /// applied twice.
    pub applied: BTreeMap<ObjectId, (RequestId, u64)>,
    /// Cluster this node belongs to while it is a plain Agent.
    pub view: Option<ClusterView>,
    pub last_heard: SimTime,
    pub backup: Option<ClusterState>,
    pub outstanding: BTreeMap<RequestId, Outstanding>,
    pub join: JoinState,
    pub voted_against: Option<NodeId>,
    /// State handed over by a merge, kept until the target confirms.
    pub merged_into: Option<(NodeId, Box<ClusterState>)>,
    pub ragent: Option<Box<RAgentState>>,
}

impl PeerState {
    pub fn new() -> Self {
        Self {
            store: BTreeMap::new(),
            applied: BTreeMap::new(),
            view: None,
            last_heard: 0,
            backup: None,
            outstanding: BTreeMap::new(),
            join: JoinState::default(),
            voted_against: None,
            merged_into: None,
            ragent: None,
        }
    }

    /// A declared RAgent heading an empty cluster.
    pub fn new_ragent(me: NodeId, migration_threshold: u32) -> Self {
        let mut s = Self::new();
        s.ragent = Some(Box::new(RAgentState::new(
            ClusterState::new(me),
            migration_threshold,
            0,
        )));
        s
    }

    /// A returning node: empty store, remembering its previous incarnation.
    pub fn returning(previous: NodeId, previous_ragent: Option<NodeId>) -> Self {
        let mut s = Self::new();
        s.join.previous = Some(previous);
        s.join.previous_ragent = previous_ragent;
        s
    }

    pub fn is_ragent(&self) -> bool {
        self.ragent.is_some()
    }

    /// The RAgent this node sends client work to.
    pub fn target_ragent(&self, me: NodeId) -> Option<NodeId> {
        if self.is_ragent() {
            Some(me)
        } else {
            self.view.as_ref().map(|v| v.ragent)
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, env: Envelope) {
        self.dispatch(ctx, env.src, env.msg);
        self.after_handler(ctx);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Tick => self.on_tick(ctx),
            Timer::Bootstrap => self.on_bootstrap_timer(ctx),
            Timer::Join => self.start_join(ctx),
            Timer::MergeRetry => self.on_merge_retry(ctx),
        }
        self.after_handler(ctx);
    }

    /// The message in `env` could not be delivered.
    pub fn on_bounce(&mut self, ctx: &mut Ctx, env: Envelope) {
        self.bounced(ctx, env.dst, env.msg);
        self.after_handler(ctx);
    }

    pub(crate) fn dispatch(&mut self, ctx: &mut Ctx, src: NodeId, msg: Message) {
        if let Some(r) = self.ragent.as_mut() {
            if r.cluster.members.contains(&src) {
                r.last_seen.insert(src, ctx.now);
            } else if r.cluster.peers.contains(&src) {
                r.peer_seen.insert(src, ctx.now);
            }
        } else if self.view.as_ref().is_some_and(|v| v.ragent == src) {
            self.last_heard = ctx.now;
        }
        match msg {
            // Agent role, whatever else this node does.
            Message::Request { req, op } => self.on_client_request(ctx, src, req, op),
            Message::Response { req, reply } => self.on_response(ctx, req, reply),
            Message::Progress { req, version } => self.on_progress(ctx, req, version),
            Message::NotRAgent { req } => self.on_not_ragent(ctx, src, req),
            Message::ReadRequest { req, id } => self.on_read(ctx, src, req, id),
            Message::Fetch { req, job, ids } => self.on_fetch(ctx, src, req, job, ids),
            Message::StoreReplica { obj, ack_to } => self.on_store_replica(ctx, obj, ack_to),
            Message::CopyReplica { id, target, ack_to } => {
                self.on_copy_replica(ctx, id, target, ack_to)
            }
            Message::DropReplica { id } => {
                self.store.remove(&id);
                self.applied.remove(&id);
            }
            Message::ApplyUpdate { req, id, payload } => {
                self.on_apply_update(ctx, src, req, id, payload)
            }
            Message::ReplicaUpdate { obj } => self.on_replica_update(ctx, src, obj),
            Message::RAgentHeartbeat { view } => self.on_ragent_heartbeat(ctx, src, view),
            Message::JoinAccepted { view } => self.on_join_accepted(ctx, src, view),
            Message::JoinRejected => self.on_join_refused(ctx, src),
            Message::ClusterConfig {
                view,
                failover_from,
            } => self.on_cluster_config(ctx, src, view, failover_from),
            Message::BackupSnapshot { state } => {
                if !self.is_ragent() {
                    self.backup = Some(*state);
                }
            }
            Message::BackupSync { deltas } => {
                if let Some(b) = self.backup.as_mut() {
                    b.apply_deltas(deltas);
                }
            }
            Message::RAgentDown { failed, vote } => self.on_ragent_down(ctx, src, failed, vote),
            Message::BecomeRAgent { state } => self.on_become_ragent(ctx, src, *state),
            Message::LusQueryReply { purpose, result } => {
                self.on_lus_reply(ctx, purpose, result.unwrap_or_default())
            }
            msg if self.is_ragent() => self.ragent_message(ctx, src, msg),
            msg => self.non_ragent_message(ctx, src, msg),
        }
    }

    /// Messages only an RAgent acts on.
    fn ragent_message(&mut self, ctx: &mut Ctx, src: NodeId, msg: Message) {
        match msg {
            Message::AgentRequest {
                req,
                origin,
                op,
                retry,
            } => self.on_agent_request(ctx, src, req, origin, op, retry),
            Message::FetchReply {
                job,
                objects,
                missing,
                ..
            } => self.on_fetch_reply(ctx, src, job, objects, missing),
            Message::ReplicaStored { id, .. } => self.on_replica_stored(ctx, src, id),
            Message::CopyFailed {
                id,
                target,
                target_down,
            } => self.on_copy_failed(ctx, src, id, target, target_down),
            Message::Applied { req, obj } => self.on_applied(ctx, src, req, obj),
            Message::ApplyFailed { req, id } => self.on_apply_failed(ctx, src, req, id),
            Message::ReplicaUpdated { id, version } => {
                self.on_replica_updated(ctx, src, id, version)
            }
            Message::ReplicaVersions { versions } => self.on_replica_versions(ctx, src, versions),
            Message::PeerHeartbeat { catalogue, .. } => self.on_peer_heartbeat(ctx, src, catalogue),
            Message::Join { previous } => self.on_join(ctx, src, previous),
            Message::AgentLeft { node } => self.on_agent_left(ctx, node),
            Message::MergeRequest { members } => self.on_merge_request(ctx, src, members),
            Message::MergeAccept => self.on_merge_accept(ctx, src),
            Message::MergeReject => self.on_merge_reject(ctx, src),
            Message::MergeInto { state } => self.on_merge_into(ctx, src, *state),
            Message::PeerHello { replaces } => self.on_peer_hello(ctx, src, replaces),
            Message::PeerList { peers } => self.on_peer_list(ctx, peers),
            Message::PeerBye | Message::NotPeer => self.peer_gone(ctx, src),
            Message::PeerSearch {
                req,
                criterion,
                mode,
            } => self.start_search(ctx, req, Route::Peer(src), criterion, mode, false),
            Message::PeerSearchReply { req, results } => {
                self.on_peer_search_reply(ctx, src, req, results)
            }
            Message::PeerInsert { req, obj } => {
                self.do_insert(ctx, req, Route::Peer(src), obj, true, true)
            }
            Message::PeerUpdate { req, id, payload } => {
                self.start_update(ctx, req, Route::Peer(src), id, payload, false)
            }
            Message::PeerUpdateClaim { req, claimed } => {
                self.on_update_claim(ctx, src, req, claimed)
            }
            Message::PeerProgress { req, version } => self.on_peer_progress(ctx, req, version),
            Message::PeerReply { req, reply } => self.on_peer_reply(ctx, req, reply),
            Message::MigrateRequest { id } => self.on_migrate_request(ctx, src, id),
            Message::MigrateObject { obj } => self.on_migrate_object(ctx, src, obj),
            Message::MigrateReject { id } => self.on_migrate_reject(ctx, src, id),
            _ => {}
        }
    }

    fn non_ragent_message(&mut self, ctx: &mut Ctx, src: NodeId, msg: Message) {
        match msg {
            // The sender resends once it learns its current RAgent.
            Message::AgentRequest { req, .. } => ctx.send(src, Message::NotRAgent { req }),
            Message::Join { .. } => ctx.send(src, Message::JoinRejected),
            Message::PeerHello { .. }
            | Message::PeerList { .. }
            | Message::PeerHeartbeat { .. }
            | Message::MergeRequest { .. } => ctx.send(src, Message::NotPeer),
            // Work forwarded by a peer that still takes this node for an
            // RAgent is answered empty so the peer does not wait on it.
            Message::PeerSearch { req, .. } => {
                ctx.send(src, Message::NotPeer);
                ctx.send(
                    src,
                    Message::PeerSearchReply {
                        req,
                        results: Vec::new(),
                    },
                );
            }
            Message::PeerUpdate { req, .. } => {
                ctx.send(src, Message::NotPeer);
                ctx.send(
                    src,
                    Message::PeerUpdateClaim {
                        req,
                        claimed: false,
                    },
                );
            }
            Message::PeerInsert { req, .. } => {
                ctx.send(src, Message::NotPeer);
                ctx.send(
                    src,
                    Message::PeerReply {
                        req,
                        reply: Reply::Failed(DataError::Unreachable(ctx.me)),
                    },
                );
            }
            Message::MigrateRequest { id } => ctx.send(src, Message::MigrateReject { id }),
            Message::MergeReject => self.on_merge_reject_demoted(ctx, src),
            Message::MergeInto { .. } => ctx.send(src, Message::MergeReject),
            _ => {}
        }
    }

    /// Post-processing shared by every handler invocation.
    fn after_handler(&mut self, ctx: &mut Ctx) {
        // a merge started by try_reconfig can demote this node
        if self.is_ragent() {
            self.try_reconfig(ctx);
        }
        if self.is_ragent() {
            self.replay_deferred(ctx);
        }
        if self.is_ragent() {
            self.sync_backup(ctx);
        }
    }
}

impl Default for PeerState {
    fn default() -> Self {
        Self::new()
    }
}

/// A client issuing scenario operations through Agents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientState {
    /// Holder learned for each object from first-match searches.
    pub holders: BTreeMap<ObjectId, NodeId>,
    pub pending: BTreeMap<RequestId, ClientOp>,
}

impl ClientState {
    pub fn start(&mut self, ctx: &mut Ctx, req: RequestId, agent: NodeId, op: ClientOp) {
        if let ClientOp::Read { id } = op {
            match self.holders.get(&id) {
                Some(h) => {
                    self.pending.insert(req, op);
                    ctx.send(*h, Message::ReadRequest { req, id });
                }
                None => ctx.effect(Effect::Completed {
                    req,
                    reply: Reply::Failed(DataError::NotHeld(id)),
                }),
            }
            return;
        }
        self.pending.insert(req, op.clone());
        ctx.send(agent, Message::Request { req, op });
    }

    fn complete(&mut self, ctx: &mut Ctx, req: RequestId, reply: Reply) {
        if self.pending.remove(&req).is_some() {
            if let Reply::First(Some((obj, holder))) = &reply {
                self.holders.insert(obj.id, *holder);
            }
            ctx.effect(Effect::Completed { req, reply });
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, env: Envelope) {
        match env.msg {
            Message::Response { req, reply } => self.complete(ctx, req, reply),
            Message::Progress { req, version } => {
                if self.pending.contains_key(&req) {
                    ctx.effect(Effect::Progress { req, version });
                }
            }
            Message::ReadResponse { req, result } => {
                let reply = match result {
                    Ok(obj) => Reply::Read(obj),
                    Err(e) => Reply::Failed(e),
                };
                self.complete(ctx, req, reply);
            }
            _ => {}
        }
    }

    pub fn on_bounce(&mut self, ctx: &mut Ctx, env: Envelope) {
        if let Some(req) = env.msg.request() {
            self.complete(ctx, req, Reply::Failed(DataError::Unreachable(env.dst)));
        }
    }
}

#[derive(Clone, Debug)]
pub enum Node {
    Peer(Box<PeerState>),
    Lus(LusState),
    Client(ClientState),
}

impl Node {
    pub fn on_message(&mut self, ctx: &mut Ctx, env: Envelope) {
        match self {
            Node::Peer(p) => p.on_message(ctx, env),
            Node::Lus(l) => l.on_message(ctx, env),
            Node::Client(c) => c.on_message(ctx, env),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        if let Node::Peer(p) = self {
            p.on_timer(ctx, timer);
        }
    }

    pub fn on_bounce(&mut self, ctx: &mut Ctx, env: Envelope) {
        match self {
            Node::Peer(p) => p.on_bounce(ctx, env),
            Node::Client(c) => c.on_bounce(ctx, env),
            Node::Lus(_) => {}
        }
    }

    pub fn as_peer(&self) -> Option<&PeerState> {
        match self {
            Node::Peer(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_peer_mut(&mut self) -> Option<&mut PeerState> {
        match self {
            Node::Peer(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_lus(&self) -> Option<&LusState> {
        match self {
            Node::Lus(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_client(&self) -> Option<&ClientState> {
        match self {
            Node::Client(c) => Some(c),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replica_history_only_moves_forward() {
        let mut o = DistObject::new("T", Vec::<String>::new(), b"a".to_vec());
        let mut r = Replica::new(o.clone());
        o.version = 2;
        o.payload = b"b".to_vec();
        assert!(r.advance(o.clone()));
        assert!(!r.advance(o.clone()));
        o.version = 1;
        assert!(!r.advance(o));
        assert_eq!(r.history.len(), 2);
        assert_eq!(r.history[1], (2, payload_digest(b"b")));
    }
}
