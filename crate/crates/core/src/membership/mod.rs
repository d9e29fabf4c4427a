//! Cluster lifecycle: join selection, deterministic voting, split and merge
//! against size thresholds, secondary backup, failure detection and the
//! repair plans run after an Agent or RAgent crash.
//!
//! Everything in this file is pure state manipulation. The message handlers
//! that drive it live in [`handlers`].

pub(crate) mod handlers;

use std::collections::{BTreeMap, BTreeSet};

use crate::catalogue::{AgentLoadTable, CatalogueEntry, CatalogueError, HolderList, MetaCatalogue};
use crate::sim::SimTime;
use crate::types::{proximity_rank, LocalityDescriptor, NodeId, ObjectId};

/// Number of replicas kept per object.
pub const REPLICATION: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MembershipError {
    #[error("no RAgent candidates")]
    NoCandidates,
    #[error("{0} is already a member")]
    AlreadyMember(NodeId),
    #[error("empty electorate")]
    EmptyElectorate,
    #[error("cluster has {members} members, split needs more than {max}")]
    BelowThreshold { members: usize, max: usize },
    #[error("no other cluster to merge into")]
    NoMergeTarget,
    #[error("{0} is not a member")]
    NotAMember(NodeId),
    #[error("RAgent {0} failed with no surviving secondary")]
    NoSurvivingSecondary(NodeId),
    #[error("min_cluster ({min}) must be positive and below max_cluster ({max})")]
    InvalidThresholds { min: usize, max: usize },
    #[error("failure timeout {timeout} must be at least twice the period {period}")]
    InvalidHeartbeat { period: SimTime, timeout: SimTime },
    #[error(transparent)]
    Catalogue(#[from] CatalogueError),
}

/// Cluster size bounds that trigger merge and split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Thresholds {
    pub min_cluster: usize,
    pub max_cluster: usize,
}

impl Thresholds {
    pub fn new(min_cluster: usize, max_cluster: usize) -> Result<Self, MembershipError> {
        if min_cluster == 0 || min_cluster >= max_cluster {
            return Err(MembershipError::InvalidThresholds {
                min: min_cluster,
                max: max_cluster,
            });
        }
        Ok(Self {
            min_cluster,
            max_cluster,
        })
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_cluster: 5,
            max_cluster: 10_000,
        }
    }
}

/// Heartbeat period and silence timeout. A zero period disables heartbeats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatConfig {
    pub period: SimTime,
    pub failure_timeout: SimTime,
}

impl HeartbeatConfig {
    pub fn new(period: SimTime, failure_timeout: SimTime) -> Result<Self, MembershipError> {
        if failure_timeout < 2 * period {
            return Err(MembershipError::InvalidHeartbeat {
                period,
                timeout: failure_timeout,
            });
        }
        Ok(Self {
            period,
            failure_timeout,
        })
    }

    pub fn enabled(&self) -> bool {
        self.period > 0
    }
}

/// An RAgent as advertised by a lookup service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub ragent: NodeId,
    pub locality: LocalityDescriptor,
    pub connected: usize,
}

/// Closest RAgent by proximity rank, then fewest connected Agents, then
/// smallest id.
pub fn join_select_ragent(
    candidates: &[Candidate],
    joiner: &LocalityDescriptor,
) -> Result<NodeId, MembershipError> {
    candidates
        .iter()
        .min_by_key(|c| {
            (
                std::cmp::Reverse(proximity_rank(&c.locality, joiner)),
                c.connected,
                c.ragent,
            )
        })
        .map(|c| c.ragent)
        .ok_or(MembershipError::NoCandidates)
}

/// Deterministic vote: the smallest id wins, so every initiator agrees.
pub fn elect_agent<'a>(
    eligible: impl IntoIterator<Item = &'a NodeId>,
) -> Result<NodeId, MembershipError> {
    eligible
        .into_iter()
        .min()
        .copied()
        .ok_or(MembershipError::EmptyElectorate)
}

/// Nodes silent for longer than `timeout`.
pub fn detect_failures(
    last_seen: &BTreeMap<NodeId, SimTime>,
    now: SimTime,
    timeout: SimTime,
) -> Vec<NodeId> {
    last_seen
        .iter()
        .filter(|(_, seen)| now.saturating_sub(**seen) > timeout)
        .map(|(n, _)| *n)
        .collect()
}

/// Merge partner: the other cluster with the fewest members, ties by id.
pub fn select_merge_target(clusters: &[(NodeId, usize)], me: NodeId) -> Option<NodeId> {
    clusters
        .iter()
        .filter(|(r, _)| *r != me)
        .min_by_key(|(r, n)| (*n, *r))
        .map(|(r, _)| *r)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPartition {
    pub new_ragent: NodeId,
    pub keep: BTreeSet<NodeId>,
    pub moved: BTreeSet<NodeId>,
}

/// Elects the new RAgent among non-secondary members and halves the rest by
/// sorted id; the lower half stays.
pub fn partition_for_split(
    members: &BTreeSet<NodeId>,
    secondary: Option<NodeId>,
) -> Result<SplitPartition, MembershipError> {
    let new_ragent = elect_agent(members.iter().filter(|m| Some(**m) != secondary))?;
    let rest: Vec<NodeId> = members.iter().copied().filter(|m| *m != new_ragent).collect();
    let keep_len = rest.len().div_ceil(2);
    Ok(SplitPartition {
        new_ragent,
        keep: rest[..keep_len].iter().copied().collect(),
        moved: rest[keep_len..].iter().copied().collect(),
    })
}

/// A replica movement requested by a repair plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplicaAction {
    /// `source` sends its replica to `target`. When `source` is the RAgent
    /// itself the copy comes from the RAgent's own store.
    Copy {
        id: ObjectId,
        source: NodeId,
        target: NodeId,
    },
    /// `holder` discards its replica.
    Drop { id: ObjectId, holder: NodeId },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Repair {
    pub actions: Vec<ReplicaAction>,
    pub lost: Vec<ObjectId>,
    /// (object, previous owner, new owner)
    pub owner_changes: Vec<(ObjectId, NodeId, NodeId)>,
    pub secondary_changed: bool,
}

impl Repair {
    fn extend(&mut self, other: Repair) {
        self.actions.extend(other.actions);
        self.lost.extend(other.lost);
        self.owner_changes.extend(other.owner_changes);
        self.secondary_changed |= other.secondary_changed;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmitOutcome {
    pub new_secondary: bool,
    pub split_needed: bool,
    /// Copies for objects that had a single holder while the cluster had
    /// a single member.
    pub repair: Repair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub new_cluster: ClusterState,
    pub keep_repair: Repair,
    pub entries_before: usize,
    pub entries_keep: usize,
    pub entries_moved: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub entries_target: usize,
    pub entries_absorbed: usize,
    pub entries_after: usize,
    pub joined: Vec<NodeId>,
    /// Copies for absorbed objects that had a single holder.
    pub repair: Repair,
}

/// Incremental change shipped to the secondary backup.
#[derive(Debug, Clone, PartialEq)]
pub enum ClusterDelta {
    Entry(CatalogueEntry),
    RemoveEntry(ObjectId),
    Members {
        members: BTreeSet<NodeId>,
        secondary: Option<NodeId>,
    },
    Peers(BTreeSet<NodeId>),
}

/// One cluster as seen by its RAgent.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub ragent: NodeId,
    pub secondary: Option<NodeId>,
    pub members: BTreeSet<NodeId>,
    pub loads: AgentLoadTable,
    pub catalogue: MetaCatalogue,
    pub peers: BTreeSet<NodeId>,
    /// Replica copies not yet confirmed: (object, target) → source.
    pub in_transit: BTreeMap<(ObjectId, NodeId), NodeId>,
    dirty_ids: BTreeSet<ObjectId>,
    dirty_members: bool,
    dirty_peers: bool,
}

impl ClusterState {
    pub fn new(ragent: NodeId) -> Self {
        Self {
            ragent,
            secondary: None,
            members: BTreeSet::new(),
            loads: AgentLoadTable::new(),
            catalogue: MetaCatalogue::new(),
            peers: BTreeSet::new(),
            in_transit: BTreeMap::new(),
            dirty_ids: BTreeSet::new(),
            dirty_members: false,
            dirty_peers: false,
        }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Marks an object as changed for the next backup sync.
    pub fn touch(&mut self, id: ObjectId) {
        self.dirty_ids.insert(id);
    }

    pub fn touch_members(&mut self) {
        self.dirty_members = true;
    }

    pub fn touch_peers(&mut self) {
        self.dirty_peers = true;
    }

    pub fn add_peer(&mut self, peer: NodeId) -> bool {
        let added = peer != self.ragent && self.peers.insert(peer);
        self.dirty_peers |= added;
        added
    }

    pub fn remove_peer(&mut self, peer: NodeId) -> bool {
        let removed = self.peers.remove(&peer);
        self.dirty_peers |= removed;
        removed
    }

    /// Drains pending backup deltas.
    pub fn take_deltas(&mut self) -> Vec<ClusterDelta> {
        let mut out = Vec::new();
        for id in std::mem::take(&mut self.dirty_ids) {
            match self.catalogue.entry(id) {
                Some(e) => out.push(ClusterDelta::Entry(e.clone())),
                None => out.push(ClusterDelta::RemoveEntry(id)),
            }
        }
        if std::mem::take(&mut self.dirty_members) {
            out.push(ClusterDelta::Members {
                members: self.members.clone(),
                secondary: self.secondary,
            });
        }
        if std::mem::take(&mut self.dirty_peers) {
            out.push(ClusterDelta::Peers(self.peers.clone()));
        }
        out
    }

    pub fn clear_dirty(&mut self) {
        self.dirty_ids.clear();
        self.dirty_members = false;
        self.dirty_peers = false;
    }

    /// Applies deltas to a backup copy.
    pub fn apply_deltas(&mut self, deltas: Vec<ClusterDelta>) {
        for d in deltas {
            match d {
                ClusterDelta::Entry(e) => self.catalogue.upsert(e),
                ClusterDelta::RemoveEntry(id) => {
                    self.catalogue.remove(id);
                }
                ClusterDelta::Members { members, secondary } => {
                    self.members = members;
                    self.secondary = secondary;
                }
                ClusterDelta::Peers(p) => self.peers = p,
            }
        }
    }

    /// A copy suitable for the secondary backup: catalogue, membership and
    /// peers, with transient bookkeeping stripped.
    pub fn backup_copy(&self) -> ClusterState {
        ClusterState {
            secondary: self.secondary,
            members: self.members.clone(),
            loads: self.loads.clone(),
            catalogue: self.catalogue.clone(),
            peers: self.peers.clone(),
            ..ClusterState::new(self.ragent)
        }
    }

    pub fn admit(
        &mut self,
        joiner: NodeId,
        thresholds: &Thresholds,
    ) -> Result<AdmitOutcome, MembershipError> {
        if joiner == self.ragent || !self.members.insert(joiner) {
            return Err(MembershipError::AlreadyMember(joiner));
        }
        self.loads.add_agent(joiner);
        self.dirty_members = true;
        let new_secondary = if self.secondary.is_none() {
            self.secondary = Some(joiner);
            true
        } else {
            false
        };
        let repair = if self.members.len() <= REPLICATION {
            self.replenish()
        } else {
            Repair::default()
        };
        Ok(AdmitOutcome {
            new_secondary,
            split_needed: self.members.len() > thresholds.max_cluster,
            repair,
        })
    }

    /// Plans copies for every object with fewer than [`REPLICATION`]
    /// holders that the membership can now support.
    pub fn replenish(&mut self) -> Repair {
        let mut repair = Repair::default();
        if self.members.len() < REPLICATION {
            return repair;
        }
        let short: Vec<ObjectId> = self
            .catalogue
            .entries()
            .filter(|e| e.holders.len() < REPLICATION)
            .map(|e| e.meta.id)
            .collect();
        for id in short {
            self.repair_object(id, &mut repair);
        }
        repair
    }

    /// Ensures `id` has [`REPLICATION`] holders, copying from a confirmed one.
    fn repair_object(&mut self, id: ObjectId, repair: &mut Repair) {
        let Some(entry) = self.catalogue.entry(id) else {
            return;
        };
        let mut holders: Vec<NodeId> = entry.holders.as_slice().to_vec();
        let confirmed: Vec<NodeId> = holders
            .iter()
            .copied()
            .filter(|h| !self.in_transit.contains_key(&(id, *h)))
            .collect();
        let Some(&source) = confirmed.first() else {
            return;
        };
        let owner = holders[0];
        if owner != source {
            self.catalogue.set_owner(id, source).expect("source is a holder");
            repair.owner_changes.push((id, owner, source));
            holders.retain(|h| *h != source);
            holders.insert(0, source);
        }
        while holders.len() < REPLICATION {
            let Some(target) = self.loads.least_loaded_excluding(&holders) else {
                break;
            };
            self.catalogue.add_holder(id, target).expect("target not a holder");
            self.loads.increment(target);
            self.in_transit.insert((id, target), source);
            repair.actions.push(ReplicaAction::Copy { id, source, target });
            holders.push(target);
        }
        self.dirty_ids.insert(id);
    }

    /// Removes a crashed member and plans the re-replication of everything
    /// it held.
    pub fn handle_agent_failure(&mut self, failed: NodeId) -> Result<Repair, MembershipError> {
        if !self.members.remove(&failed) {
            return Err(MembershipError::NotAMember(failed));
        }
        self.loads.remove_agent(failed);
        self.dirty_members = true;
        let mut repair = Repair::default();
        let mut touched = BTreeSet::new();

        // Copies sourced from the failed node will never land.
        let doomed: Vec<(ObjectId, NodeId)> = self
            .in_transit
            .iter()
            .filter(|(_, src)| **src == failed)
            .map(|(k, _)| *k)
            .collect();
        for (id, target) in doomed {
            self.in_transit.remove(&(id, target));
            if self.catalogue.holders_of(id).is_ok_and(|h| h.contains(target)) {
                self.catalogue
                    .remove_holder(id, target)
                    .expect("holder checked above");
                self.loads.decrement(target);
            }
            touched.insert(id);
        }
        self.in_transit.retain(|(_, target), _| *target != failed);

        // A failed owner is replaced by the next holder in list order.
        for orphan in self.catalogue.remove_agent(failed) {
            touched.insert(orphan.id);
        }

        for id in touched {
            self.dirty_ids.insert(id);
            if self.catalogue.contains(id) {
                self.repair_object(id, &mut repair);
            } else {
                repair.lost.push(id);
            }
        }

        if self.secondary == Some(failed) {
            self.secondary = elect_agent(&self.members).ok();
            repair.secondary_changed = true;
        }
        Ok(repair)
    }

    /// Marks a copy to `target` as landed.
    pub fn copy_confirmed(&mut self, id: ObjectId, target: NodeId) -> bool {
        self.in_transit.remove(&(id, target)).is_some()
    }

    /// Removes live holders found not to have the replica and re-replicates
    /// from whatever is left.
    pub fn drop_holders(&mut self, id: ObjectId, nodes: &[NodeId]) -> Repair {
        let mut repair = Repair::default();
        if !self.catalogue.contains(id) {
            return repair;
        }
        for n in nodes {
            self.in_transit.remove(&(id, *n));
            let emptied = match self.catalogue.remove_holder(id, *n) {
                Ok(rest) => rest.is_none(),
                Err(_) => continue,
            };
            self.loads.decrement(*n);
            if emptied {
                repair.lost.push(id);
                break;
            }
        }
        self.dirty_ids.insert(id);
        if repair.lost.is_empty() {
            self.repair_object(id, &mut repair);
        }
        repair
    }

    /// Replaces every holder that is not a member (other side of a split, a
    /// promoted RAgent) with a member, copying from a confirmed holder.
    pub fn rehome_outsiders(&mut self) -> Repair {
        let mut repair = Repair::default();
        let affected: Vec<ObjectId> = self
            .catalogue
            .entries()
            .filter(|e| e.holders.iter().any(|h| !self.members.contains(&h)))
            .map(|e| e.meta.id)
            .collect();
        for id in affected {
            let holders: Vec<NodeId> = self.catalogue.holders_of(id).expect("listed").iter().collect();
            let (insiders, outsiders): (Vec<NodeId>, Vec<NodeId>) =
                holders.iter().partition(|h| self.members.contains(h));
            let confirmed = |h: &NodeId| !self.in_transit.contains_key(&(id, *h));
            let source = insiders
                .iter()
                .copied()
                .find(confirmed)
                .or_else(|| outsiders.iter().copied().find(confirmed));
            let Some(source) = source else {
                continue;
            };
            let mut new_list = insiders.clone();
            if let Some(pos) = new_list.iter().position(|h| *h == source) {
                new_list.remove(pos);
                new_list.insert(0, source);
            }
            let mut copies = Vec::new();
            while new_list.len() + copies.len() < REPLICATION {
                let mut exclude = new_list.clone();
                exclude.extend(copies.iter().copied());
                let Some(target) = self.loads.least_loaded_excluding(&exclude) else {
                    break;
                };
                self.loads.increment(target);
                copies.push(target);
            }
            new_list.extend(copies.iter().copied());
            for h in &outsiders {
                self.in_transit.remove(&(id, *h));
            }
            let old_owner = holders[0];
            if new_list.is_empty() {
                self.catalogue.remove(id);
                repair.lost.push(id);
            } else {
                if new_list[0] != old_owner {
                    repair.owner_changes.push((id, old_owner, new_list[0]));
                }
                self.catalogue
                    .set_holders(id, HolderList::new(new_list).expect("non-empty, distinct"))
                    .expect("listed");
                for target in copies {
                    // Copies out of the RAgent's own store are sent directly
                    // and are confirmed by FIFO delivery.
                    if source != self.ragent {
                        self.in_transit.insert((id, target), source);
                    }
                    repair.actions.push(ReplicaAction::Copy { id, source, target });
                }
            }
            // Drops go after the copies so an outsider source still has the
            // replica when its copy request arrives.
            for h in outsiders {
                if h != self.ragent {
                    repair.actions.push(ReplicaAction::Drop { id, holder: h });
                }
            }
            self.dirty_ids.insert(id);
        }
        repair
    }

    /// Splits an oversized cluster. `self` becomes the keep side; the
    /// returned state belongs to the newly elected RAgent, which re-homes its
    /// own straddling replicas once it takes over.
    pub fn split(&mut self, thresholds: &Thresholds) -> Result<SplitOutcome, MembershipError> {
        if self.members.len() <= thresholds.max_cluster {
            return Err(MembershipError::BelowThreshold {
                members: self.members.len(),
                max: thresholds.max_cluster,
            });
        }
        let SplitPartition {
            new_ragent,
            keep,
            moved,
        } = partition_for_split(&self.members, self.secondary)?;

        // The new RAgent stops holding replicas: hand its ownerships over
        // before dividing the catalogue by owner.
        let owned: Vec<ObjectId> = self
            .catalogue
            .entries()
            .filter(|e| e.holders.owner() == new_ragent && e.holders.len() > 1)
            .map(|e| e.meta.id)
            .collect();
        for id in owned {
            let other = self.catalogue.holders_of(id)?.as_slice()[1];
            self.catalogue.set_owner(id, other)?;
        }

        let entries_before = self.catalogue.len();
        let (keep_cat, move_cat) = self.catalogue.split(&keep, &moved);
        let entries_keep = keep_cat.len();
        let entries_moved = move_cat.len();

        let mut peers = self.peers.clone();
        peers.insert(self.ragent);
        let mut new_cluster = ClusterState {
            secondary: elect_agent(&moved).ok(),
            loads: AgentLoadTable::from_catalogue(&moved, &move_cat),
            members: moved,
            catalogue: move_cat,
            peers,
            ..ClusterState::new(new_ragent)
        };
        new_cluster.in_transit = self
            .in_transit
            .iter()
            .filter(|((id, _), _)| new_cluster.catalogue.contains(*id))
            .map(|(k, v)| (*k, *v))
            .collect();

        self.in_transit.retain(|(id, _), _| keep_cat.contains(*id));
        self.loads = AgentLoadTable::from_catalogue(&keep, &keep_cat);
        self.catalogue = keep_cat;
        if !self.secondary.is_some_and(|s| keep.contains(&s)) {
            self.secondary = elect_agent(&keep).ok();
        }
        self.members = keep;
        self.peers.insert(new_ragent);
        let keep_repair = self.rehome_outsiders();

        self.dirty_ids.clear();
        self.dirty_members = true;
        self.dirty_peers = true;
        Ok(SplitOutcome {
            new_cluster,
            keep_repair,
            entries_before,
            entries_keep,
            entries_moved,
        })
    }

    /// Absorbs an undersized cluster: its members and its demoted RAgent
    /// join this cluster and the catalogues are merged.
    pub fn absorb(&mut self, small: ClusterState) -> Result<MergeOutcome, MembershipError> {
        if let Some(id) = small.catalogue.ids().find(|id| self.catalogue.contains(*id)) {
            return Err(CatalogueError::ConflictingObject(id).into());
        }
        let entries_target = self.catalogue.len();
        let entries_absorbed = small.catalogue.len();
        let catalogue = std::mem::take(&mut self.catalogue);
        self.catalogue = catalogue.merge(small.catalogue)?;

        let mut joined: Vec<NodeId> = small.members.iter().copied().collect();
        joined.push(small.ragent);
        joined.sort_unstable();
        joined.retain(|n| *n != self.ragent && !self.members.contains(n));
        self.members.extend(joined.iter().copied());
        self.in_transit.extend(small.in_transit);
        self.loads = AgentLoadTable::from_catalogue(&self.members, &self.catalogue);
        self.peers.remove(&small.ragent);
        if self.secondary.is_none() {
            self.secondary = elect_agent(&self.members).ok();
        }
        let repair = self.replenish();
        self.dirty_ids.clear();
        self.dirty_members = true;
        self.dirty_peers = true;
        Ok(MergeOutcome {
            entries_target,
            entries_absorbed,
            entries_after: self.catalogue.len(),
            joined,
            repair,
        })
    }

    /// Rebuilds a cluster from the backup copy held by its secondary, which
    /// takes over as RAgent and stops holding replicas itself.
    pub fn promote(backup: ClusterState, new_ragent: NodeId) -> (ClusterState, Repair) {
        let mut state = backup;
        state.ragent = new_ragent;
        state.members.remove(&new_ragent);
        state.in_transit.clear();
        state.peers.remove(&new_ragent);
        state.loads = AgentLoadTable::from_catalogue(&state.members, &state.catalogue);
        state.secondary = elect_agent(&state.members).ok();
        let mut repair = Repair {
            secondary_changed: true,
            ..Repair::default()
        };
        repair.extend(state.rehome_outsiders());
        state.dirty_ids.clear();
        state.dirty_members = true;
        state.dirty_peers = true;
        (state, repair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalogue::ObjectMeta;
    use crate::types::DistObject;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn loc(net: &str, asd: &str, country: &str, cont: &str) -> LocalityDescriptor {
        LocalityDescriptor::new(net, asd, country, cont).unwrap()
    }

    fn cluster_with(members: &[u32]) -> ClusterState {
        let mut c = ClusterState::new(n(100));
        let t = Thresholds::new(2, 1000).unwrap();
        for m in members {
            c.admit(n(*m), &t).unwrap();
        }
        c
    }

    fn place(c: &mut ClusterState, payload: &str, holders: &[u32]) -> ObjectId {
        let o = DistObject::new("T", Vec::<String>::new(), payload.as_bytes().to_vec());
        let hl = HolderList::new(holders.iter().map(|h| n(*h)).collect()).unwrap();
        for h in holders {
            c.loads.increment(n(*h));
        }
        c.catalogue.insert(ObjectMeta::of(&o), hl).unwrap();
        o.id
    }

    #[test]
    fn join_selection_examples() {
        let joiner = loc("x", "as1", "ro", "eu");
        let cands = vec![
            Candidate { ragent: n(1), locality: loc("a", "as1", "ro", "eu"), connected: 10 },
            Candidate { ragent: n(2), locality: loc("b", "as1", "ro", "eu"), connected: 4 },
            Candidate { ragent: n(3), locality: loc("c", "as9", "fr", "eu"), connected: 2 },
        ];
        // ranks 3, 3, 1 with counts 10, 4, 2
        assert_eq!(join_select_ragent(&cands, &joiner), Ok(n(2)));
        assert_eq!(join_select_ragent(&cands[2..], &joiner), Ok(n(3)));
        let tied = vec![
            Candidate { ragent: n(7), locality: loc("a", "as1", "ro", "eu"), connected: 1 },
            Candidate { ragent: n(5), locality: loc("b", "as1", "ro", "eu"), connected: 1 },
        ];
        assert_eq!(join_select_ragent(&tied, &joiner), Ok(n(5)));
        assert_eq!(join_select_ragent(&[], &joiner), Err(MembershipError::NoCandidates));
    }

    #[test]
    fn election_is_argmin() {
        let set: BTreeSet<NodeId> = [n(7), n(3), n(9)].into();
        assert_eq!(elect_agent(&set), Ok(n(3)));
        assert_eq!(elect_agent(&set), elect_agent(&set));
        assert_eq!(elect_agent(&BTreeSet::from([n(4)])), Ok(n(4)));
        assert_eq!(elect_agent(&BTreeSet::new()), Err(MembershipError::EmptyElectorate));
    }

    #[test]
    fn admit_examples() {
        let t = Thresholds::new(2, 8).unwrap();
        let mut c = cluster_with(&[1, 2, 3]);
        let out = c.admit(n(4), &t).unwrap();
        assert_eq!(c.size(), 4);
        assert!(!out.split_needed);
        assert_eq!(c.admit(n(4), &t), Err(MembershipError::AlreadyMember(n(4))));
        for m in 5..=8 {
            assert!(!c.admit(n(m), &t).unwrap().split_needed);
        }
        assert!(c.admit(n(9), &t).unwrap().split_needed);
        assert_eq!(c.secondary, Some(n(1)));
    }

    #[test]
    fn thresholds_and_heartbeat_validation() {
        assert!(Thresholds::new(5, 5).is_err());
        assert!(Thresholds::new(0, 5).is_err());
        assert_eq!(Thresholds::default(), Thresholds { min_cluster: 5, max_cluster: 10_000 });
        assert!(HeartbeatConfig::new(1000, 1999).is_err());
        assert!(HeartbeatConfig::new(1000, 2000).is_ok());
        assert!(!HeartbeatConfig::new(0, 0).unwrap().enabled());
    }

    #[test]
    fn detect_failures_timeout_arithmetic() {
        let period = 1000;
        let timeout = 2500;
        let now = 10_000;
        let seen: BTreeMap<NodeId, SimTime> =
            [(n(1), now - period), (n(2), now - 3 * period), (n(3), now)].into();
        assert_eq!(detect_failures(&seen, now, timeout), vec![n(2)]);
        let fresh: BTreeMap<NodeId, SimTime> = [(n(1), now), (n(2), now - 100)].into();
        assert!(detect_failures(&fresh, now, timeout).is_empty());
    }

    #[test]
    fn split_partition_arithmetic() {
        let t = Thresholds::new(2, 8).unwrap();
        let mut c = cluster_with(&[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let a = place(&mut c, "a", &[1, 2]);
        let b = place(&mut c, "b", &[6, 7]);
        let x = place(&mut c, "x", &[2, 8]); // owned by the RAgent-to-be
        let out = c.split(&t).unwrap();
        // secondary n1 excluded from the vote, so n2 becomes RAgent.
        assert_eq!(out.new_cluster.ragent, n(2));
        assert_eq!(c.members, [n(1), n(3), n(4), n(5)].into());
        assert_eq!(out.new_cluster.members, [n(6), n(7), n(8), n(9)].into());
        assert_eq!(out.entries_keep + out.entries_moved, out.entries_before);
        assert!(c.catalogue.contains(a));
        assert!(out.new_cluster.catalogue.contains(b));
        assert!(out.new_cluster.catalogue.contains(x));
        assert_eq!(out.new_cluster.catalogue.owner(x), Some(n(8)));
        assert_eq!(c.secondary, Some(n(1)));
        assert_eq!(out.new_cluster.secondary, Some(n(6)));
        assert!(c.peers.contains(&n(2)));
        assert!(out.new_cluster.peers.contains(&n(100)));
        // n2 held a replica of `a`; it is re-homed inside the keep side.
        let holders = c.catalogue.holders_of(a).unwrap();
        assert_eq!(holders.owner(), n(1));
        assert!(holders.iter().all(|h| c.members.contains(&h)));
        assert_eq!(holders.len(), 2);

        let mut small = cluster_with(&[1, 2, 3]);
        assert_eq!(
            small.split(&t),
            Err(MembershipError::BelowThreshold { members: 3, max: 8 })
        );
    }

    #[test]
    fn merge_membership_arithmetic() {
        let mut target = cluster_with(&[1, 2, 3, 4, 5]);
        let mut small = ClusterState::new(n(200));
        small.admit(n(6), &Thresholds::new(2, 8).unwrap()).unwrap();
        let a = place(&mut target, "a", &[1, 2]);
        let b = place(&mut small, "b", &[6]);
        target.peers.insert(n(200));
        let out = target.absorb(small).unwrap();
        assert_eq!(target.size(), 7);
        assert_eq!(out.joined, vec![n(6), n(200)]);
        assert_eq!(out.entries_after, 2);
        assert!(target.catalogue.contains(a) && target.catalogue.contains(b));
        assert!(!target.peers.contains(&n(200)));
    }

    #[test]
    fn merge_target_rule() {
        assert_eq!(select_merge_target(&[(n(1), 3), (n(2), 5)], n(1)), Some(n(2)));
        assert_eq!(select_merge_target(&[(n(1), 3)], n(1)), None);
        assert_eq!(
            select_merge_target(&[(n(4), 2), (n(3), 2), (n(1), 0)], n(1)),
            Some(n(3))
        );
    }

    #[test]
    fn agent_failure_reassigns_owner_and_rebalances() {
        let mut c = cluster_with(&[1, 2, 3]);
        let o1 = place(&mut c, "o1", &[1, 2]);
        let repair = c.handle_agent_failure(n(1)).unwrap();
        assert_eq!(c.catalogue.holders_of(o1).unwrap().as_slice(), &[n(2), n(3)]);
        assert_eq!(
            repair.actions,
            vec![ReplicaAction::Copy { id: o1, source: n(2), target: n(3) }]
        );
        assert!(repair.secondary_changed);
        assert_eq!(c.secondary, Some(n(2)));
        assert!(repair.lost.is_empty());
        assert_eq!(c.handle_agent_failure(n(1)), Err(MembershipError::NotAMember(n(1))));
    }

    #[test]
    fn failure_of_idle_agent_is_membership_only() {
        let mut c = cluster_with(&[1, 2, 3]);
        place(&mut c, "o1", &[1, 2]);
        let before = c.catalogue.clone();
        let repair = c.handle_agent_failure(n(3)).unwrap();
        assert_eq!(repair, Repair::default());
        assert_eq!(c.catalogue, before);
    }

    #[test]
    fn source_crash_voids_pending_copy() {
        let mut c = cluster_with(&[1, 2, 3, 4]);
        let o = place(&mut c, "o", &[1, 2]);
        c.handle_agent_failure(n(1)).unwrap(); // copy n2 -> n3 in flight
        assert!(c.in_transit.contains_key(&(o, n(3))));
        let repair = c.handle_agent_failure(n(2)).unwrap();
        assert_eq!(repair.lost, vec![o]);
        assert!(!c.catalogue.contains(o));
        assert!(c.in_transit.is_empty());
    }

    #[test]
    fn promotion_rehomes_secondary_replicas() {
        let mut c = cluster_with(&[1, 2, 3, 4]);
        let o = place(&mut c, "o", &[1, 2]);
        let (state, repair) = ClusterState::promote(c.backup_copy(), n(1));
        assert_eq!(state.ragent, n(1));
        assert!(!state.members.contains(&n(1)));
        assert_eq!(state.secondary, Some(n(2)));
        let holders = state.catalogue.holders_of(o).unwrap();
        assert_eq!(holders.owner(), n(2));
        assert_eq!(holders.as_slice(), &[n(2), n(3)]);
        assert_eq!(
            repair.actions,
            vec![ReplicaAction::Copy { id: o, source: n(2), target: n(3) }]
        );
    }

    #[test]
    fn deltas_roundtrip_into_backup() {
        let mut c = cluster_with(&[1, 2]);
        let mut backup = c.backup_copy();
        c.take_deltas();
        let o = place(&mut c, "o", &[1, 2]);
        c.touch(o);
        c.admit(n(3), &Thresholds::new(2, 8).unwrap()).unwrap();
        backup.apply_deltas(c.take_deltas());
        assert_eq!(backup.catalogue, c.catalogue);
        assert_eq!(backup.members, c.members);
        c.catalogue.remove(o);
        c.touch(o);
        backup.apply_deltas(c.take_deltas());
        assert!(backup.catalogue.is_empty());
    }
}
