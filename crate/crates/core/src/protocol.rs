//! Wire vocabulary between simulated nodes and the context handlers use to
//! emit messages, timers and observations.

use std::collections::BTreeSet;
use std::fmt;

use crate::dataops::{DataError, SearchMode};
use crate::lus::LusRecord;
use crate::membership::{Candidate, ClusterDelta, ClusterState};
use crate::sim::accounting::StepEvent;
use crate::sim::{SimConfig, SimTime};
use crate::types::{DistObject, LocalityDescriptor, NodeId, ObjectId, PatternKey, Role};

/// Client operation id. Scenario operations use their event index;
/// internally generated ids set the top bit.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct RequestId(pub u64);

impl RequestId {
    pub fn internal(node: NodeId, n: u32) -> Self {
        RequestId((1 << 63) | (u64::from(node.0) << 32) | u64::from(n))
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where the answer to an RAgent-level operation goes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Route {
    /// Straight back to the Agent acting for the client.
    Agent(NodeId),
    /// To the peer RAgent that forwarded the operation; it relays.
    Peer(NodeId),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum ClientOp {
    Insert(DistObject),
    Search { criterion: PatternKey, mode: SearchMode },
    Update { id: ObjectId, payload: Vec<u8> },
    Read { id: ObjectId },
}

impl ClientOp {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientOp::Insert(_) => "insert",
            ClientOp::Search { mode: SearchMode::All, .. } => "search",
            ClientOp::Search { mode: SearchMode::First, .. } => "search_first",
            ClientOp::Update { .. } => "update",
            ClientOp::Read { .. } => "read",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Reply {
    Inserted { id: ObjectId },
    Found(Vec<DistObject>),
    First(Option<(DistObject, NodeId)>),
    Committed { id: ObjectId, version: u64 },
    Read(DistObject),
    Failed(DataError),
}

impl Reply {
    pub fn outcome(&self) -> &'static str {
        match self {
            Reply::Failed(DataError::InsufficientAgents) => "insufficient-agents",
            Reply::Failed(DataError::DuplicateObject(_)) => "duplicate",
            Reply::Failed(DataError::UnknownObject(_)) => "unknown-object",
            Reply::Failed(DataError::NotHeld(_)) => "not-held",
            Reply::Failed(DataError::MigrationRace(_)) => "migration-race",
            Reply::Failed(DataError::Unreachable(_)) => "unreachable",
            _ => "ok",
        }
    }
}

/// Membership view pushed to Agents.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClusterView {
    pub ragent: NodeId,
    pub secondary: Option<NodeId>,
    pub members: BTreeSet<NodeId>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum QueryPurpose {
    Join,
    Bootstrap,
    Merge,
}

#[derive(Clone, PartialEq, Eq, Debug, thiserror::Error)]
#[error("lookup services refuse client queries")]
pub struct AccessDenied;

#[derive(Clone, PartialEq, Debug)]
pub enum Message {
    // client <-> agent
    Request { req: RequestId, op: ClientOp },
    Response { req: RequestId, reply: Reply },
    Progress { req: RequestId, version: u64 },
    ReadRequest { req: RequestId, id: ObjectId },
    ReadResponse { req: RequestId, result: Result<DistObject, DataError> },

    // agent <-> RAgent
    AgentRequest { req: RequestId, origin: NodeId, op: ClientOp, retry: bool },
    NotRAgent { req: RequestId },
    Fetch { req: RequestId, job: u64, ids: Vec<ObjectId> },
    FetchReply { req: RequestId, job: u64, objects: Vec<DistObject>, missing: Vec<ObjectId> },
    StoreReplica { obj: DistObject, ack_to: Option<NodeId> },
    ReplicaStored { id: ObjectId, version: u64 },
    CopyReplica { id: ObjectId, target: NodeId, ack_to: NodeId },
    /// The copy to `target` did not happen: the source lacked the replica,
    /// or `target_down` when the target bounced it.
    CopyFailed { id: ObjectId, target: NodeId, target_down: bool },
    DropReplica { id: ObjectId },
    ApplyUpdate { req: RequestId, id: ObjectId, payload: Vec<u8> },
    Applied { req: RequestId, obj: DistObject },
    ApplyFailed { req: RequestId, id: ObjectId },
    ReplicaUpdate { obj: DistObject },
    ReplicaUpdated { id: ObjectId, version: u64 },
    /// A member's stored versions, sent to an RAgent that took over from a
    /// crashed one whose last update may not have reached the catalogue.
    ReplicaVersions { versions: Vec<(ObjectId, u64)> },

    // membership
    Heartbeat,
    RAgentHeartbeat { view: ClusterView },
    PeerHeartbeat { catalogue: usize, members: usize },
    Join { previous: Option<NodeId> },
    JoinAccepted { view: ClusterView },
    JoinRejected,
    AgentLeft { node: NodeId },
    ClusterConfig { view: ClusterView, failover_from: Option<NodeId> },
    BackupSnapshot { state: Box<ClusterState> },
    BackupSync { deltas: Vec<ClusterDelta> },
    RAgentDown { failed: NodeId, vote: Option<NodeId> },
    BecomeRAgent { state: Box<ClusterState> },
    MergeRequest { members: usize },
    MergeAccept,
    MergeReject,
    MergeInto { state: Box<ClusterState> },

    // RAgent <-> RAgent
    PeerHello { replaces: Option<NodeId> },
    PeerList { peers: BTreeSet<NodeId> },
    PeerBye,
    NotPeer,
    PeerSearch { req: RequestId, criterion: PatternKey, mode: SearchMode },
    PeerSearchReply { req: RequestId, results: Vec<(DistObject, NodeId)> },
    PeerInsert { req: RequestId, obj: DistObject },
    PeerUpdate { req: RequestId, id: ObjectId, payload: Vec<u8> },
    PeerUpdateClaim { req: RequestId, claimed: bool },
    PeerProgress { req: RequestId, version: u64 },
    PeerReply { req: RequestId, reply: Reply },
    MigrateRequest { id: ObjectId },
    MigrateObject { obj: DistObject },
    MigrateReject { id: ObjectId },

    // lookup services
    LusRegister { ragent: NodeId, locality: LocalityDescriptor, connected: usize },
    LusDeregister { ragent: NodeId },
    LusQuery { purpose: QueryPurpose },
    LusQueryReply { purpose: QueryPurpose, result: Result<Vec<Candidate>, AccessDenied> },
    LusReplicate { records: Vec<LusRecord> },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        use Message::*;
        match self {
            Request { .. } => "Request",
            Response { .. } => "Response",
            Progress { .. } => "Progress",
            ReadRequest { .. } => "ReadRequest",
            ReadResponse { .. } => "ReadResponse",
            AgentRequest { .. } => "AgentRequest",
            NotRAgent { .. } => "NotRAgent",
            Fetch { .. } => "Fetch",
            FetchReply { .. } => "FetchReply",
            StoreReplica { .. } => "StoreReplica",
            ReplicaStored { .. } => "ReplicaStored",
            CopyReplica { .. } => "CopyReplica",
            CopyFailed { .. } => "CopyFailed",
            DropReplica { .. } => "DropReplica",
            ApplyUpdate { .. } => "ApplyUpdate",
            Applied { .. } => "Applied",
            ApplyFailed { .. } => "ApplyFailed",
            ReplicaUpdate { .. } => "ReplicaUpdate",
            ReplicaUpdated { .. } => "ReplicaUpdated",
            ReplicaVersions { .. } => "ReplicaVersions",
            Heartbeat => "Heartbeat",
            RAgentHeartbeat { .. } => "RAgentHeartbeat",
            PeerHeartbeat { .. } => "PeerHeartbeat",
            Join { .. } => "Join",
            JoinAccepted { .. } => "JoinAccepted",
            JoinRejected => "JoinRejected",
            AgentLeft { .. } => "AgentLeft",
            ClusterConfig { .. } => "ClusterConfig",
            BackupSnapshot { .. } => "BackupSnapshot",
            BackupSync { .. } => "BackupSync",
            RAgentDown { .. } => "RAgentDown",
            BecomeRAgent { .. } => "BecomeRAgent",
            MergeRequest { .. } => "MergeRequest",
            MergeAccept => "MergeAccept",
            MergeReject => "MergeReject",
            MergeInto { .. } => "MergeInto",
            PeerHello { .. } => "PeerHello",
            PeerList { .. } => "PeerList",
            PeerBye => "PeerBye",
            NotPeer => "NotPeer",
            PeerSearch { .. } => "PeerSearch",
            PeerSearchReply { .. } => "PeerSearchReply",
            PeerInsert { .. } => "PeerInsert",
            PeerUpdate { .. } => "PeerUpdate",
            PeerUpdateClaim { .. } => "PeerUpdateClaim",
            PeerProgress { .. } => "PeerProgress",
            PeerReply { .. } => "PeerReply",
            MigrateRequest { .. } => "MigrateRequest",
            MigrateObject { .. } => "MigrateObject",
            MigrateReject { .. } => "MigrateReject",
            LusRegister { .. } => "LusRegister",
            LusDeregister { .. } => "LusDeregister",
            LusQuery { .. } => "LusQuery",
            LusQueryReply { .. } => "LusQueryReply",
            LusReplicate { .. } => "LusReplicate",
        }
    }

    /// Request the message explicitly belongs to.
    pub fn request(&self) -> Option<RequestId> {
        use Message::*;
        match self {
            Request { req, .. }
            | Response { req, .. }
            | Progress { req, .. }
            | ReadRequest { req, .. }
            | ReadResponse { req, .. }
            | AgentRequest { req, .. }
            | NotRAgent { req }
            | Fetch { req, .. }
            | FetchReply { req, .. }
            | ApplyUpdate { req, .. }
            | Applied { req, .. }
            | ApplyFailed { req, .. }
            | PeerSearch { req, .. }
            | PeerSearchReply { req, .. }
            | PeerInsert { req, .. }
            | PeerUpdate { req, .. }
            | PeerUpdateClaim { req, .. }
            | PeerProgress { req, .. }
            | PeerReply { req, .. } => Some(*req),
            _ => None,
        }
    }

    /// Fire-and-forget liveness traffic: dropped silently at dead nodes.
    pub fn is_datagram(&self) -> bool {
        matches!(
            self,
            Message::Heartbeat | Message::RAgentHeartbeat { .. } | Message::PeerHeartbeat { .. }
        )
    }

    /// Control traffic between RAgents.
    pub fn is_inter_ragent(&self) -> bool {
        use Message::*;
        matches!(
            self,
            PeerHeartbeat { .. }
                | MergeRequest { .. }
                | MergeAccept
                | MergeReject
                | MergeInto { .. }
                | PeerHello { .. }
                | PeerList { .. }
                | PeerBye
                | PeerSearch { .. }
                | PeerSearchReply { .. }
                | PeerInsert { .. }
                | PeerUpdate { .. }
                | PeerUpdateClaim { .. }
                | PeerProgress { .. }
                | PeerReply { .. }
                | MigrateRequest { .. }
                | MigrateObject { .. }
                | MigrateReject { .. }
        )
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct Envelope {
    pub src: NodeId,
    pub dst: NodeId,
    /// Role the sender was declared with; lookup services check it.
    pub src_role: Role,
    /// Causal depth from the operation or timer that started the chain.
    pub hop: u32,
    pub req: Option<RequestId>,
    pub msg: Message,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Timer {
    /// Heartbeat emission and failure sweep.
    Tick,
    /// Declared RAgents discover each other.
    Bootstrap,
    /// Agent starts or retries its join.
    Join,
    /// Undersized cluster retries its merge.
    MergeRetry,
}

impl Timer {
    pub fn as_str(self) -> &'static str {
        match self {
            Timer::Tick => "tick",
            Timer::Bootstrap => "bootstrap",
            Timer::Join => "join",
            Timer::MergeRetry => "merge-retry",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum MemberKind {
    Admit,
    Remove,
    Left,
    Split,
    Merge,
    Promote,
    Vote,
    ClusterLost,
    Secondary,
    Bootstrap,
}

impl MemberKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MemberKind::Admit => "admit",
            MemberKind::Remove => "remove",
            MemberKind::Left => "left",
            MemberKind::Split => "split",
            MemberKind::Merge => "merge",
            MemberKind::Promote => "promote",
            MemberKind::Vote => "vote",
            MemberKind::ClusterLost => "cluster-lost",
            MemberKind::Secondary => "secondary",
            MemberKind::Bootstrap => "bootstrap",
        }
    }
}

/// A value attached to a membership record.
#[derive(Clone, PartialEq, Debug)]
pub enum Detail {
    Node(NodeId),
    Num(u64),
    Text(&'static str),
}

/// Observation emitted by a handler for the metrics stream.
#[derive(Clone, PartialEq, Debug)]
pub enum Effect {
    Step { req: RequestId, ragent: NodeId, event: StepEvent },
    Member { kind: MemberKind, cluster: NodeId, node: NodeId, detail: Vec<(&'static str, Detail)> },
    /// Entries moved by a split or merge: (before, first part, second part).
    Entries { kind: MemberKind, cluster: NodeId, before: usize, parts: (usize, usize) },
    Lost { id: ObjectId, cluster: NodeId },
    Completed { req: RequestId, reply: Reply },
    Progress { req: RequestId, version: u64 },
}

#[derive(Clone, PartialEq, Debug)]
pub struct Outgoing {
    pub dst: NodeId,
    pub msg: Message,
    pub req: Option<RequestId>,
    pub hop: u32,
}

#[derive(Default, Debug)]
pub struct Outbox {
    pub sends: Vec<Outgoing>,
    pub timers: Vec<(SimTime, Timer)>,
    pub effects: Vec<Effect>,
}

/// Static facts a node knows about itself and its surroundings.
#[derive(Clone, Debug)]
pub struct NodeEnv {
    pub locality: LocalityDescriptor,
    pub nearest_lus: NodeId,
    pub lus: Vec<NodeId>,
}

/// Handler context: the current time, who is running, and the outbox.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub me: NodeId,
    pub config: &'a SimConfig,
    pub env: &'a NodeEnv,
    hop: u32,
    req: Option<RequestId>,
    pub out: Outbox,
}

impl<'a> Ctx<'a> {
    pub fn new(
        now: SimTime,
        me: NodeId,
        config: &'a SimConfig,
        env: &'a NodeEnv,
        hop: u32,
        req: Option<RequestId>,
    ) -> Self {
        Self {
            now,
            me,
            config,
            env,
            hop,
            req,
            out: Outbox::default(),
        }
    }

    /// Request implicitly attached to sends whose message carries none.
    pub fn set_request(&mut self, req: Option<RequestId>) {
        self.req = req;
    }

    pub fn request(&self) -> Option<RequestId> {
        self.req
    }

    pub fn send(&mut self, dst: NodeId, msg: Message) {
        let req = msg.request().or(self.req);
        self.out.sends.push(Outgoing {
            dst,
            msg,
            req,
            hop: self.hop + 1,
        });
    }

    pub fn timer(&mut self, delay: SimTime, timer: Timer) {
        self.out.timers.push((delay, timer));
    }

    pub fn effect(&mut self, effect: Effect) {
        self.out.effects.push(effect);
    }

    pub fn member(
        &mut self,
        kind: MemberKind,
        cluster: NodeId,
        node: NodeId,
        detail: Vec<(&'static str, Detail)>,
    ) {
        self.out.effects.push(Effect::Member {
            kind,
            cluster,
            node,
            detail,
        });
    }

    pub fn step(&mut self, req: RequestId, ragent: NodeId, event: StepEvent) {
        self.out.effects.push(Effect::Step { req, ragent, event });
    }
}
