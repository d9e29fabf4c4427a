//! Per-RAgent meta-data catalogue: pattern keys map to object ids, each
//! object id maps to an ordered holder list whose first element is the owner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::sim::accounting::ceil_log2;
use crate::types::{keys_for, DistObject, KeyKind, NodeId, ObjectId, PatternKey};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogueError {
    #[error("object {0} is already catalogued")]
    DuplicateObject(ObjectId),
    #[error("object {0} is not catalogued")]
    UnknownObject(ObjectId),
    #[error("{node} does not hold a replica of {id}")]
    NotAHolder { id: ObjectId, node: NodeId },
    #[error("object {0} appears in both catalogues")]
    ConflictingObject(ObjectId),
    #[error("holder list must be non-empty")]
    EmptyHolderList,
    #[error("holder {0} listed twice")]
    DuplicateHolder(NodeId),
}

/// Agents holding replicas of one object, owner first.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HolderList(Vec<NodeId>);

impl HolderList {
    pub fn new(agents: Vec<NodeId>) -> Result<Self, CatalogueError> {
        if agents.is_empty() {
            return Err(CatalogueError::EmptyHolderList);
        }
        let mut seen = BTreeSet::new();
        for a in &agents {
            if !seen.insert(*a) {
                return Err(CatalogueError::DuplicateHolder(*a));
            }
        }
        Ok(Self(agents))
    }

    pub fn owner(&self) -> NodeId {
        self.0[0]
    }

    pub fn as_slice(&self) -> &[NodeId] {
        &self.0
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.0.contains(&node)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.0.iter().copied()
    }

    pub fn push(&mut self, node: NodeId) -> Result<(), CatalogueError> {
        if self.contains(node) {
            return Err(CatalogueError::DuplicateHolder(node));
        }
        self.0.push(node);
        Ok(())
    }
}

/// Identity fields of a catalogued object.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ObjectMeta {
    pub id: ObjectId,
    pub type_tag: String,
    pub index_keys: BTreeSet<String>,
}

impl ObjectMeta {
    pub fn of(obj: &DistObject) -> Self {
        Self {
            id: obj.id,
            type_tag: obj.type_tag.clone(),
            index_keys: obj.index_keys.clone(),
        }
    }

    fn keys(&self) -> Vec<PatternKey> {
        keys_for(&self.type_tag, &self.index_keys)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CatalogueEntry {
    pub meta: ObjectMeta,
    pub holders: HolderList,
    /// Last committed version known to the RAgent.
    pub version: u64,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Orphan {
    pub id: ObjectId,
    /// Remaining holders, owner first. Empty means the object is lost and
    /// its entry has been dropped.
    pub survivors: Vec<NodeId>,
}

/// Result of a catalogue lookup together with its accounted key steps.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Lookup {
    /// Matching objects with their owners, ascending by id.
    pub matches: Vec<(ObjectId, NodeId)>,
    pub key_steps: u64,
    /// Number of distinct keys in the catalogue at lookup time (M).
    pub key_count: usize,
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct MetaCatalogue {
    keys: BTreeMap<PatternKey, BTreeSet<ObjectId>>,
    entries: BTreeMap<ObjectId, CatalogueEntry>,
}

impl MetaCatalogue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of catalogued objects.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of distinct pattern keys (M).
    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn entry(&self, id: ObjectId) -> Option<&CatalogueEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CatalogueEntry> {
        self.entries.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.entries.keys().copied()
    }

    pub fn owner(&self, id: ObjectId) -> Option<NodeId> {
        self.entries.get(&id).map(|e| e.holders.owner())
    }

    pub fn insert(&mut self, meta: ObjectMeta, holders: HolderList) -> Result<(), CatalogueError> {
        self.insert_entry(CatalogueEntry {
            meta,
            holders,
            version: 0,
        })
    }

    pub fn insert_entry(&mut self, entry: CatalogueEntry) -> Result<(), CatalogueError> {
        let id = entry.meta.id;
        if self.entries.contains_key(&id) {
            return Err(CatalogueError::DuplicateObject(id));
        }
        for key in entry.meta.keys() {
            self.keys.entry(key).or_default().insert(id);
        }
        self.entries.insert(id, entry);
        Ok(())
    }

    /// Inserts or replaces an entry wholesale.
    pub fn upsert(&mut self, entry: CatalogueEntry) {
        self.remove(entry.meta.id);
        self.insert_entry(entry).expect("entry removed above");
    }

    pub fn remove(&mut self, id: ObjectId) -> Option<CatalogueEntry> {
        let entry = self.entries.remove(&id)?;
        for key in entry.meta.keys() {
            if let Some(ids) = self.keys.get_mut(&key) {
                ids.remove(&id);
                if ids.is_empty() {
                    self.keys.remove(&key);
                }
            }
        }
        Some(entry)
    }

    /// Pattern criteria scan every key (M comparisons); exact-type criteria
    /// go through the ordered index and are accounted ⌈log2 M⌉ steps.
    pub fn lookup(&self, criterion: &PatternKey) -> Lookup {
        let key_count = self.keys.len();
        let (ids, key_steps) = match criterion.kind {
            KeyKind::Pattern => {
                let mut steps = 0u64;
                let mut found = None;
                for (key, ids) in &self.keys {
                    steps += 1;
                    if key == criterion {
                        found = Some(ids);
                    }
                }
                (found, steps)
            }
            KeyKind::ExactType => {
                let steps = if key_count == 0 {
                    0
                } else {
                    ceil_log2(key_count as u64)
                };
                (self.keys.get(criterion), steps)
            }
        };
        let matches = ids
            .map(|ids| {
                ids.iter()
                    .map(|id| (*id, self.entries[id].holders.owner()))
                    .collect()
            })
            .unwrap_or_default();
        Lookup {
            matches,
            key_steps,
            key_count,
        }
    }

    pub fn holders_of(&self, id: ObjectId) -> Result<&HolderList, CatalogueError> {
        self.entries
            .get(&id)
            .map(|e| &e.holders)
            .ok_or(CatalogueError::UnknownObject(id))
    }

    pub fn set_owner(&mut self, id: ObjectId, new_owner: NodeId) -> Result<(), CatalogueError> {
        let entry = self
            .entries
            .get_mut(&id)
            .ok_or(CatalogueError::UnknownObject(id))?;
        let pos = entry
            .holders
            .0
            .iter()
            .position(|h| *h == new_owner)
            .ok_or(CatalogueError::NotAHolder { id, node: new_owner })?;
        let owner = entry.holders.0.remove(pos);
        entry.holders.0.insert(0, owner);
        Ok(())
    }

    pub fn set_holders(&mut self, id: ObjectId, holders: HolderList) -> Result<(), CatalogueError> {
        let entry = self
            .entries
            .get_mut(&id)
            .ok_or(CatalogueError::UnknownObject(id))?;
        entry.holders = holders;
        Ok(())
    }

    pub fn add_holder(&mut self, id: ObjectId, node: NodeId) -> Result<(), CatalogueError> {
        self.entries
            .get_mut(&id)
            .ok_or(CatalogueError::UnknownObject(id))?
            .holders
            .push(node)
    }

    pub fn set_version(&mut self, id: ObjectId, version: u64) -> Result<(), CatalogueError> {
        self.entries
            .get_mut(&id)
            .ok_or(CatalogueError::UnknownObject(id))?
            .version = version;
        Ok(())
    }

    /// Removes `node` from one holder list. Returns the remaining holders,
    /// or `None` when the list emptied and the entry was dropped.
    pub fn remove_holder(
        &mut self,
        id: ObjectId,
        node: NodeId,
    ) -> Result<Option<&HolderList>, CatalogueError> {
        let entry = self
            .entries
            .get_mut(&id)
            .ok_or(CatalogueError::UnknownObject(id))?;
        let before = entry.holders.0.len();
        entry.holders.0.retain(|h| *h != node);
        if entry.holders.0.len() == before {
            return Err(CatalogueError::NotAHolder { id, node });
        }
        if entry.holders.0.is_empty() {
            self.remove(id);
            return Ok(None);
        }
        Ok(Some(&self.entries[&id].holders))
    }

    /// Drops `failed` from every holder list and reports each affected
    /// object with its survivors. Objects left with no holder are removed.
    pub fn remove_agent(&mut self, failed: NodeId) -> Vec<Orphan> {
        let affected: Vec<ObjectId> = self
            .entries
            .values()
            .filter(|e| e.holders.contains(failed))
            .map(|e| e.meta.id)
            .collect();
        affected
            .into_iter()
            .map(|id| {
                let survivors = match self.remove_holder(id, failed) {
                    Ok(Some(h)) => h.0.clone(),
                    Ok(None) => Vec::new(),
                    Err(_) => unreachable!("holder checked above"),
                };
                Orphan { id, survivors }
            })
            .collect()
    }

    /// Divides the catalogue by owner: entries whose owner is in
    /// `move_agents` go to the second catalogue, all others stay in the first.
    /// Holder lists are copied unchanged.
    pub fn split(
        &self,
        keep_agents: &BTreeSet<NodeId>,
        move_agents: &BTreeSet<NodeId>,
    ) -> (MetaCatalogue, MetaCatalogue) {
        debug_assert!(keep_agents.is_disjoint(move_agents));
        let mut keep = MetaCatalogue::new();
        let mut moved = MetaCatalogue::new();
        for entry in self.entries.values() {
            let side = if move_agents.contains(&entry.holders.owner()) {
                &mut moved
            } else {
                &mut keep
            };
            side.insert_entry(entry.clone()).expect("ids unique in source");
        }
        (keep, moved)
    }

    pub fn merge(mut self, other: MetaCatalogue) -> Result<MetaCatalogue, CatalogueError> {
        if let Some(id) = other.entries.keys().find(|id| self.entries.contains_key(id)) {
            return Err(CatalogueError::ConflictingObject(*id));
        }
        for entry in other.entries.into_values() {
            self.insert_entry(entry)?;
        }
        Ok(self)
    }

    /// One line per (key, object): `key-kind key object-id owner holder,holder,...`,
    /// sorted by key then object id.
    pub fn dump_with(&self, name: impl Fn(NodeId) -> String) -> String {
        let mut out = String::new();
        for (key, ids) in &self.keys {
            for id in ids {
                let holders = &self.entries[id].holders;
                let list: Vec<String> = holders.iter().map(&name).collect();
                let _ = writeln!(
                    out,
                    "{} {} {} {} {}",
                    key.kind.as_str(),
                    key.key,
                    id,
                    name(holders.owner()),
                    list.join(",")
                );
            }
        }
        out
    }

    pub fn dump(&self) -> String {
        self.dump_with(|n| n.to_string())
    }
}

/// Replica counts per member Agent, used for balanced placement.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct AgentLoadTable {
    counts: BTreeMap<NodeId, u64>,
}

impl AgentLoadTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts holder-list appearances of each member.
    pub fn from_catalogue<'a>(
        members: impl IntoIterator<Item = &'a NodeId>,
        catalogue: &MetaCatalogue,
    ) -> Self {
        let mut counts: BTreeMap<NodeId, u64> = members.into_iter().map(|m| (*m, 0)).collect();
        for entry in catalogue.entries() {
            for h in entry.holders.iter() {
                if let Some(c) = counts.get_mut(&h) {
                    *c += 1;
                }
            }
        }
        Self { counts }
    }

    pub fn add_agent(&mut self, agent: NodeId) {
        self.counts.entry(agent).or_insert(0);
    }

    pub fn remove_agent(&mut self, agent: NodeId) -> Option<u64> {
        self.counts.remove(&agent)
    }

    pub fn get(&self, agent: NodeId) -> Option<u64> {
        self.counts.get(&agent).copied()
    }

    pub fn increment(&mut self, agent: NodeId) {
        if let Some(c) = self.counts.get_mut(&agent) {
            *c += 1;
        }
    }

    pub fn decrement(&mut self, agent: NodeId) {
        if let Some(c) = self.counts.get_mut(&agent) {
            *c = c.saturating_sub(1);
        }
    }

    pub fn set(&mut self, agent: NodeId, count: u64) {
        self.counts.insert(agent, count);
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, u64)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    /// Agents ordered by (load, id).
    pub fn ranked(&self) -> Vec<NodeId> {
        let mut v: Vec<(u64, NodeId)> = self.counts.iter().map(|(n, c)| (*c, *n)).collect();
        v.sort_unstable();
        v.into_iter().map(|(_, n)| n).collect()
    }

    /// Least-loaded agent not in `exclude`, ties by smallest id.
    pub fn least_loaded_excluding(&self, exclude: &[NodeId]) -> Option<NodeId> {
        self.counts
            .iter()
            .filter(|(n, _)| !exclude.contains(n))
            .min_by_key(|(n, c)| (**c, **n))
            .map(|(n, _)| *n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn obj(t: &str, keys: &[&str], payload: &str) -> DistObject {
        DistObject::new(t, keys.iter().copied(), payload.as_bytes().to_vec())
    }

    fn hl(v: &[u32]) -> HolderList {
        HolderList::new(v.iter().map(|i| n(*i)).collect()).unwrap()
    }

    fn insert(cat: &mut MetaCatalogue, o: &DistObject, holders: &[u32]) {
        cat.insert(ObjectMeta::of(o), hl(holders)).unwrap();
    }

    #[test]
    fn insert_into_empty_creates_one_key() {
        let mut cat = MetaCatalogue::new();
        let o1 = obj("A", &[], "1");
        insert(&mut cat, &o1, &[1, 2]);
        assert_eq!(cat.key_count(), 1);
        let l = cat.lookup(&PatternKey::exact("A"));
        assert_eq!(l.matches, vec![(o1.id, n(1))]);
    }

    #[test]
    fn insert_lists_under_type_and_patterns() {
        let mut cat = MetaCatalogue::new();
        let o2 = obj("B", &["hot"], "2");
        insert(&mut cat, &o2, &[3, 4]);
        assert_eq!(cat.lookup(&PatternKey::exact("B")).matches, vec![(o2.id, n(3))]);
        assert_eq!(cat.lookup(&PatternKey::pattern("hot")).matches, vec![(o2.id, n(3))]);
        assert!(cat.lookup(&PatternKey::exact("hot")).matches.is_empty());
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut cat = MetaCatalogue::new();
        let o = obj("A", &[], "1");
        insert(&mut cat, &o, &[1, 2]);
        assert_eq!(
            cat.insert(ObjectMeta::of(&o), hl(&[3])),
            Err(CatalogueError::DuplicateObject(o.id))
        );
    }

    #[test]
    fn lookup_examples() {
        let mut cat = MetaCatalogue::new();
        assert!(cat.lookup(&PatternKey::exact("A")).matches.is_empty());
        assert_eq!(cat.lookup(&PatternKey::exact("A")).key_steps, 0);

        let o1 = obj("A", &[], "1");
        let o2 = obj("B", &[], "2");
        insert(&mut cat, &o1, &[1, 2]);
        insert(&mut cat, &o2, &[2, 3]);
        assert_eq!(cat.lookup(&PatternKey::exact("A")).matches, vec![(o1.id, n(1))]);

        let o3 = obj("C", &[], "3");
        insert(&mut cat, &o3, &[1, 3]);
        let l = cat.lookup(&PatternKey::pattern("nothing"));
        assert_eq!(l.key_count, 3);
        assert_eq!(l.key_steps, 3);
        // ⌈log2 3⌉ = 2
        assert_eq!(cat.lookup(&PatternKey::exact("C")).key_steps, 2);
    }

    #[test]
    fn exact_steps_floor_at_one() {
        let mut cat = MetaCatalogue::new();
        insert(&mut cat, &obj("A", &[], "1"), &[1]);
        assert_eq!(cat.lookup(&PatternKey::exact("A")).key_steps, 1);
    }

    #[test]
    fn set_owner_reorders() {
        let mut cat = MetaCatalogue::new();
        let o1 = obj("A", &[], "1");
        insert(&mut cat, &o1, &[1, 2]);
        cat.set_owner(o1.id, n(1)).unwrap();
        assert_eq!(cat.holders_of(o1.id).unwrap(), &hl(&[1, 2]));
        cat.set_owner(o1.id, n(2)).unwrap();
        assert_eq!(cat.holders_of(o1.id).unwrap(), &hl(&[2, 1]));
        assert_eq!(cat.owner(o1.id), Some(n(2)));
        assert_eq!(
            cat.set_owner(o1.id, n(3)),
            Err(CatalogueError::NotAHolder { id: o1.id, node: n(3) })
        );
        let unknown = obj("Z", &[], "z").id;
        assert_eq!(cat.set_owner(unknown, n(1)), Err(CatalogueError::UnknownObject(unknown)));
        assert_eq!(cat.holders_of(unknown), Err(CatalogueError::UnknownObject(unknown)));
    }

    #[test]
    fn remove_agent_reports_orphans() {
        let mut cat = MetaCatalogue::new();
        let o1 = obj("A", &[], "1");
        let o2 = obj("A", &[], "2");
        insert(&mut cat, &o1, &[1, 2]);
        insert(&mut cat, &o2, &[1, 2]);

        let before = cat.clone();
        assert!(cat.remove_agent(n(9)).is_empty());
        assert_eq!(cat, before);

        let orphans = cat.remove_agent(n(1));
        let mut expected = vec![
            Orphan { id: o1.id, survivors: vec![n(2)] },
            Orphan { id: o2.id, survivors: vec![n(2)] },
        ];
        expected.sort_by_key(|o| o.id);
        assert_eq!(orphans, expected);
        assert_eq!(cat.owner(o1.id), Some(n(2)));
        assert_eq!(
            cat.set_owner(o1.id, n(3)),
            Err(CatalogueError::NotAHolder { id: o1.id, node: n(3) })
        );
        let unknown = obj("Z", &[], "z").id;
        assert_eq!(cat.set_owner(unknown, n(1)), Err(CatalogueError::UnknownObject(unknown)));
        assert_eq!(cat.holders_of(unknown), Err(CatalogueError::UnknownObject(unknown)));

        let orphans = cat.remove_agent(n(2));
        assert!(orphans.iter().all(|o| o.survivors.is_empty()));
        assert!(cat.is_empty());
        assert_eq!(cat.key_count(), 0);
    }

    #[test]
    fn split_by_owner_side() {
        let mut cat = MetaCatalogue::new();
        let o1 = obj("A", &[], "1");
        let o2 = obj("A", &[], "2");
        let o3 = obj("B", &["p"], "3");
        insert(&mut cat, &o1, &[1, 2]);
        insert(&mut cat, &o2, &[3, 1]); // owner on move side, replica on keep side
        insert(&mut cat, &o3, &[4, 3]);
        let keep: BTreeSet<_> = [n(1), n(2)].into();
        let mv: BTreeSet<_> = [n(3), n(4)].into();
        let (a, b) = cat.split(&keep, &mv);
        assert_eq!(a.len() + b.len(), cat.len());
        assert!(a.contains(o1.id));
        assert!(b.contains(o2.id));
        assert_eq!(b.holders_of(o2.id).unwrap(), &hl(&[3, 1]));
        assert!(b.contains(o3.id));

        let all: BTreeSet<_> = [n(1), n(2), n(3), n(4)].into();
        let (a, b) = cat.split(&all, &BTreeSet::new());
        assert_eq!(a, cat);
        assert!(b.is_empty());
    }

    #[test]
    fn merge_rules() {
        let mut a = MetaCatalogue::new();
        let mut b = MetaCatalogue::new();
        for i in 0..3 {
            insert(&mut a, &obj("A", &[], &format!("a{i}")), &[1, 2]);
        }
        for i in 0..2 {
            insert(&mut b, &obj("B", &["k"], &format!("b{i}")), &[3, 4]);
        }
        assert_eq!(a.clone().merge(MetaCatalogue::new()).unwrap(), a);
        let merged = a.clone().merge(b.clone()).unwrap();
        assert_eq!(merged.len(), 5);
        let ids: BTreeSet<_> = a.ids().chain(b.ids()).collect();
        assert_eq!(merged.ids().collect::<BTreeSet<_>>(), ids);

        let dup = obj("A", &[], "a0");
        let mut c = MetaCatalogue::new();
        insert(&mut c, &dup, &[5]);
        assert_eq!(a.merge(c), Err(CatalogueError::ConflictingObject(dup.id)));
    }

    #[test]
    fn holder_list_rules() {
        assert_eq!(HolderList::new(vec![]), Err(CatalogueError::EmptyHolderList));
        assert_eq!(
            HolderList::new(vec![n(1), n(1)]),
            Err(CatalogueError::DuplicateHolder(n(1)))
        );
    }

    #[test]
    fn dump_format_is_sorted() {
        let mut cat = MetaCatalogue::new();
        let o = obj("T", &["p"], "x");
        insert(&mut cat, &o, &[2, 1]);
        let dump = cat.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], format!("exact T {} n2 n2,n1", o.id));
        assert_eq!(lines[1], format!("pattern p {} n2 n2,n1", o.id));
    }

    #[test]
    fn load_table_ranking() {
        let mut t = AgentLoadTable::new();
        t.set(n(1), 5);
        t.set(n(2), 1);
        t.set(n(3), 3);
        assert_eq!(t.ranked(), vec![n(2), n(3), n(1)]);
        assert_eq!(t.least_loaded_excluding(&[n(2)]), Some(n(3)));
    }
}
