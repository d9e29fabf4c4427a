//! Data protocols: search (all matches or first match), insert with
//! two-replica placement and delegation, owner-locked updates, direct reads
//! and hot-object migration.
//!
//! The pure building blocks live here; the RAgent and Agent handlers that
//! sequence them are in [`handlers`].

pub(crate) mod handlers;

use std::collections::{BTreeMap, VecDeque};

use crate::catalogue::AgentLoadTable;
use crate::protocol::{RequestId, Route};
use crate::types::{DistObject, NodeId, ObjectId, PatternKey};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("fewer than two Agents available for placement")]
    InsufficientAgents,
    #[error("object {0} already exists")]
    DuplicateObject(ObjectId),
    #[error("object {0} is unknown")]
    UnknownObject(ObjectId),
    #[error("replica of {0} not held here")]
    NotHeld(ObjectId),
    #[error("object {0} is being migrated elsewhere")]
    MigrationRace(ObjectId),
    #[error("{0} is unreachable")]
    Unreachable(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SearchMode {
    All,
    First,
}

impl SearchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchMode::All => "all",
            SearchMode::First => "first",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchRequest {
    pub request_id: RequestId,
    pub criterion: PatternKey,
    pub mode: SearchMode,
    pub origin: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateRequest {
    pub object_id: ObjectId,
    pub new_payload: Vec<u8>,
    pub initiator: NodeId,
}

/// The two least-loaded Agents, ties by smallest id; the first is the owner.
pub fn select_replica_holders(loads: &AgentLoadTable) -> Result<(NodeId, NodeId), DataError> {
    let ranked = loads.ranked();
    match ranked.as_slice() {
        [a, b, ..] => Ok((*a, *b)),
        _ => Err(DataError::InsufficientAgents),
    }
}

/// Union of partial results, deduplicated by id, ascending by id.
pub fn merge_results<I>(partials: I) -> Vec<DistObject>
where
    I: IntoIterator,
    I::Item: IntoIterator<Item = DistObject>,
{
    let mut by_id: BTreeMap<ObjectId, DistObject> = BTreeMap::new();
    for list in partials {
        for obj in list {
            by_id.entry(obj.id).or_insert(obj);
        }
    }
    by_id.into_values().collect()
}

/// Whether an insert should be handed to the peer with the smallest
/// catalogue: the local catalogue is at least `factor` times the mean over
/// all known catalogues and at least `floor` entries.
pub fn should_delegate(local: usize, peer_sizes: &[usize], factor: f64, floor: usize) -> bool {
    if peer_sizes.is_empty() || local < floor {
        return false;
    }
    let total: usize = local + peer_sizes.iter().sum::<usize>();
    let mean = total as f64 / (peer_sizes.len() + 1) as f64;
    local as f64 >= factor * mean
}

/// One queued or running update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateJob {
    pub req: RequestId,
    pub route: Route,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LockStage {
    /// Waiting for the owner to apply the payload.
    AwaitApply { owner: NodeId },
    /// Owner applied `version`; waiting for the other holders to confirm.
    AwaitReplicas {
        version: u64,
        object: DistObject,
        waiting: Vec<NodeId>,
    },
    /// Object is leaving this cluster.
    Migrating,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lock {
    pub current: Option<UpdateJob>,
    pub stage: LockStage,
    pub queue: VecDeque<UpdateJob>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Acquire {
    Granted,
    Queued { position: usize },
}

/// At most one in-flight update per object; later arrivals wait in FIFO
/// order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LockTable {
    locks: BTreeMap<ObjectId, Lock>,
}

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.locks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.locks.len()
    }

    pub fn is_locked(&self, id: ObjectId) -> bool {
        self.locks.contains_key(&id)
    }

    pub fn get(&self, id: ObjectId) -> Option<&Lock> {
        self.locks.get(&id)
    }

    pub fn get_mut(&mut self, id: ObjectId) -> Option<&mut Lock> {
        self.locks.get_mut(&id)
    }

    pub fn ids(&self) -> Vec<ObjectId> {
        self.locks.keys().copied().collect()
    }

    pub fn acquire(&mut self, id: ObjectId, job: UpdateJob, owner: NodeId) -> Acquire {
        match self.locks.get_mut(&id) {
            Some(lock) => {
                lock.queue.push_back(job);
                Acquire::Queued {
                    position: lock.queue.len(),
                }
            }
            None => {
                self.locks.insert(
                    id,
                    Lock {
                        current: Some(job),
                        stage: LockStage::AwaitApply { owner },
                        queue: VecDeque::new(),
                    },
                );
                Acquire::Granted
            }
        }
    }

    /// Locks an object for migration. Fails if any update holds it.
    pub fn lock_for_migration(&mut self, id: ObjectId) -> Result<(), DataError> {
        if self.locks.contains_key(&id) {
            return Err(DataError::MigrationRace(id));
        }
        self.locks.insert(
            id,
            Lock {
                current: None,
                stage: LockStage::Migrating,
                queue: VecDeque::new(),
            },
        );
        Ok(())
    }

    /// Finishes the running job. Returns the next queued job, which now
    /// holds the lock, or `None` when the lock is released.
    pub fn release(&mut self, id: ObjectId, next_owner: NodeId) -> Option<UpdateJob> {
        let lock = self.locks.get_mut(&id)?;
        match lock.queue.pop_front() {
            Some(next) => {
                lock.current = Some(next.clone());
                lock.stage = LockStage::AwaitApply { owner: next_owner };
                Some(next)
            }
            None => {
                self.locks.remove(&id);
                None
            }
        }
    }

    /// Drops the lock and returns every job that was running or waiting.
    pub fn remove(&mut self, id: ObjectId) -> Vec<UpdateJob> {
        match self.locks.remove(&id) {
            Some(lock) => lock.current.into_iter().chain(lock.queue).collect(),
            None => Vec::new(),
        }
    }
}

/// Remote first-search tallies kept by the requesting RAgent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HotCounter {
    counts: BTreeMap<ObjectId, u32>,
    pub migration_threshold: u32,
}

impl HotCounter {
    pub fn new(migration_threshold: u32) -> Self {
        Self {
            counts: BTreeMap::new(),
            migration_threshold,
        }
    }

    /// Counts one remote hit; true once the threshold is reached.
    pub fn record(&mut self, id: ObjectId) -> bool {
        let c = self.counts.entry(id).or_insert(0);
        *c += 1;
        self.migration_threshold > 0 && *c >= self.migration_threshold
    }

    pub fn get(&self, id: ObjectId) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn reset(&mut self, id: ObjectId) {
        self.counts.remove(&id);
    }
}
