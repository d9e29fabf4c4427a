//! Module invariants checked on generated inputs against independent
//! oracles.

use std::collections::{BTreeMap, BTreeSet};

use disthash::catalogue::{AgentLoadTable, CatalogueEntry, HolderList, MetaCatalogue, ObjectMeta};
use disthash::dataops::{merge_results, select_replica_holders};
use disthash::membership::{elect_agent, partition_for_split, Thresholds};
use disthash::protocol::RequestId;
use disthash::sim::accounting::{ceil_log2, StepCounter, StepEvent};
use disthash::sim::LatencyModel;
use disthash::types::{
    canonical_encode, derive_object_id, proximity_rank, DistObject, KeyKind, LocalityDescriptor, NodeId, ObjectId,
    PatternKey,
};
use proptest::prelude::*;

fn locality() -> impl Strategy<Value = LocalityDescriptor> {
    // two values per tier so that every rank from 0 to 4 shows up
    (0..2u8, 0..2u8, 0..2u8, 0..2u8).prop_map(|(n, a, c, k)| {
        LocalityDescriptor::new(format!("net{n}"), format!("as{a}"), format!("c{c}"), format!("k{k}")).unwrap()
    })
}

fn object() -> impl Strategy<Value = DistObject> {
    (
        prop::sample::select(vec!["Doc", "Log", "Cam"]),
        prop::collection::btree_set(0..8u8, 0..4),
        prop::collection::vec(any::<u8>(), 0..16),
    )
        .prop_map(|(t, keys, payload)| DistObject::new(t, keys.iter().map(|k| format!("k{k}")), payload))
}

/// Tier-by-tier comparison, broad to narrow, written out independently.
fn rank_oracle(a: &LocalityDescriptor, b: &LocalityDescriptor) -> u8 {
    let pairs = [
        (&a.continent, &b.continent),
        (&a.country, &b.country),
        (&a.as_domain, &b.as_domain),
        (&a.network_domain, &b.network_domain),
    ];
    let mut r = 0;
    for (x, y) in pairs {
        if x != y {
            break;
        }
        r += 1;
    }
    r
}

proptest! {
    #[test]
    fn object_ids_are_pure_and_key_order_free(obj in object(), salt in any::<u8>()) {
        let enc = canonical_encode(&obj.type_tag, &obj.index_keys, &obj.payload);
        prop_assert_eq!(derive_object_id(&enc), derive_object_id(&enc));
        prop_assert_eq!(derive_object_id(&enc), obj.id);
        let reversed: Vec<String> = obj.index_keys.iter().rev().cloned().collect();
        let again = DistObject::new(obj.type_tag.clone(), reversed, obj.payload.clone());
        prop_assert_eq!(again.id, obj.id);
        let mut payload = obj.payload.clone();
        payload.push(salt);
        let other = DistObject::new(obj.type_tag.clone(), obj.index_keys.iter().cloned(), payload);
        prop_assert_ne!(other.id, obj.id);
    }

    #[test]
    fn proximity_rank_is_symmetric_and_maximal_on_self(a in locality(), b in locality()) {
        prop_assert_eq!(proximity_rank(&a, &b), proximity_rank(&b, &a));
        prop_assert_eq!(proximity_rank(&a, &b), rank_oracle(&a, &b));
        prop_assert_eq!(proximity_rank(&a, &a), 4);
    }

    #[test]
    fn latency_is_positive_and_reproducible(
        a in locality(), b in locality(), seed in any::<u64>(),
        base in 0u64..5_000, tier in 0u64..5_000, jitter in 0u64..5_000,
        (pa, pb) in (0usize..50, 0usize..50),
    ) {
        let m = LatencyModel { base, per_tier: tier, jitter };
        let d = m.delay(seed, pa, pb, &a, &b);
        prop_assert!(d > 0);
        prop_assert_eq!(d, m.delay(seed, pa, pb, &a, &b));
        let floor = base + u64::from(4 - rank_oracle(&a, &b)) * tier;
        prop_assert!(d >= floor && d <= (floor + jitter).max(1));
    }

    #[test]
    fn thresholds_accept_exactly_increasing_positive_pairs(min in 0usize..50, max in 0usize..50) {
        prop_assert_eq!(Thresholds::new(min, max).is_ok(), min >= 1 && min < max);
    }
}

// ---- catalogue ----

/// Objects with holder lists of two distinct Agents drawn from `agents`.
fn placed(agents: u32, max: usize) -> impl Strategy<Value = Vec<(DistObject, Vec<NodeId>)>> {
    prop::collection::vec((object(), 0..agents, 1..agents), 0..max).prop_map(move |v| {
        let mut seen = BTreeSet::new();
        v.into_iter()
            .filter(|(o, _, _)| seen.insert(o.id))
            .map(|(o, a, d)| {
                let b = (a + d) % agents;
                (o, vec![NodeId(a), NodeId(b)])
            })
            .collect()
    })
}

fn catalogue_of(objs: &[(DistObject, Vec<NodeId>)]) -> MetaCatalogue {
    let mut c = MetaCatalogue::new();
    for (o, h) in objs {
        c.insert(ObjectMeta::of(o), HolderList::new(h.clone()).unwrap()).unwrap();
    }
    c
}

fn pairs(c: &MetaCatalogue) -> BTreeMap<ObjectId, Vec<NodeId>> {
    c.entries().map(|e| (e.meta.id, e.holders.as_slice().to_vec())).collect()
}

fn criterion() -> impl Strategy<Value = PatternKey> {
    prop_oneof![
        prop::sample::select(vec!["Doc", "Log", "Cam", "None"]).prop_map(PatternKey::exact),
        (0..9u8).prop_map(|k| PatternKey::pattern(format!("k{k}"))),
    ]
}

proptest! {
    #[test]
    fn lookup_matches_a_brute_force_scan(objs in placed(12, 200), crit in criterion()) {
        let c = catalogue_of(&objs);
        let got = c.lookup(&crit);
        let want: Vec<(ObjectId, NodeId)> = {
            let mut v: Vec<_> = objs.iter().filter(|(o, _)| o.matches(&crit)).map(|(o, h)| (o.id, h[0])).collect();
            v.sort();
            v
        };
        prop_assert_eq!(&got.matches, &want);
        let keys: BTreeSet<PatternKey> = objs.iter().flat_map(|(o, _)| o.keys()).collect();
        prop_assert_eq!(got.key_count, keys.len());
        match crit.kind {
            KeyKind::Pattern => prop_assert_eq!(got.key_steps, keys.len() as u64),
            KeyKind::ExactType => prop_assert!(keys.is_empty() || got.key_steps <= ceil_log2(keys.len() as u64)),
        }
    }

    #[test]
    fn owner_is_the_first_holder(objs in placed(12, 100), ops in prop::collection::vec((any::<prop::sample::Index>(), 0..12u32, any::<bool>()), 0..40)) {
        let mut c = catalogue_of(&objs);
        for (i, node, add) in ops {
            let ids: Vec<ObjectId> = c.ids().collect();
            if ids.is_empty() {
                break;
            }
            let id = *i.get(&ids);
            let n = NodeId(node);
            if add {
                let _ = c.add_holder(id, n);
            } else if c.holders_of(id).unwrap().len() > 1 {
                let _ = c.remove_holder(id, n);
            }
        }
        for e in c.entries() {
            prop_assert_eq!(c.owner(e.meta.id), Some(e.holders.as_slice()[0]));
            let distinct: BTreeSet<NodeId> = e.holders.iter().collect();
            prop_assert_eq!(distinct.len(), e.holders.len());
        }
    }

    #[test]
    fn split_then_merge_conserves_entries(objs in placed(12, 150), side in prop::collection::vec(any::<bool>(), 12)) {
        let c = catalogue_of(&objs);
        let keep: BTreeSet<NodeId> = (0..12).filter(|i| !side[*i as usize]).map(NodeId).collect();
        let moved: BTreeSet<NodeId> = (0..12).filter(|i| side[*i as usize]).map(NodeId).collect();
        let (a, b) = c.split(&keep, &moved);
        prop_assert_eq!(a.len() + b.len(), c.len());
        for e in b.entries() {
            prop_assert!(moved.contains(&e.holders.owner()));
        }
        for e in a.entries() {
            prop_assert!(!moved.contains(&e.holders.owner()));
        }
        let back = a.merge(b).unwrap();
        prop_assert_eq!(pairs(&back), pairs(&c));
        for crit in [PatternKey::exact("Doc"), PatternKey::pattern("k1")] {
            prop_assert_eq!(back.lookup(&crit).matches, c.lookup(&crit).matches);
        }
    }

    #[test]
    fn removing_an_agent_reports_every_entry_it_held(objs in placed(8, 120), failed in 0..8u32) {
        let mut c = catalogue_of(&objs);
        let f = NodeId(failed);
        let held: BTreeSet<ObjectId> = objs.iter().filter(|(_, h)| h.contains(&f)).map(|(o, _)| o.id).collect();
        let orphans = c.remove_agent(f);
        let reported: BTreeSet<ObjectId> = orphans.iter().map(|o| o.id).collect();
        prop_assert_eq!(reported, held);
        for e in c.entries() {
            prop_assert!(!e.holders.contains(f));
        }
    }
}

// ---- membership ----

proptest! {
    #[test]
    fn every_initiator_elects_the_same_agent(
        electorate in prop::collection::btree_set(0..1000u32, 1..30),
        orders in prop::collection::vec(any::<u64>(), 1..6),
    ) {
        let ids: Vec<NodeId> = electorate.iter().copied().map(NodeId).collect();
        let want = *ids.iter().min().unwrap();
        for key in orders {
            // each initiator sees the electorate in its own order
            let mut view = ids.clone();
            view.sort_by_key(|n| (u64::from(n.0) ^ key).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            prop_assert_eq!(elect_agent(&view).unwrap(), want);
        }
    }

    #[test]
    fn split_partition_covers_members_evenly(
        members in prop::collection::btree_set(0..500u32, 2..40),
        pick in any::<prop::sample::Index>(),
    ) {
        let m: BTreeSet<NodeId> = members.into_iter().map(NodeId).collect();
        let v: Vec<NodeId> = m.iter().copied().collect();
        let secondary = Some(*pick.get(&v));
        let p = partition_for_split(&m, secondary).unwrap();
        prop_assert_ne!(Some(p.new_ragent), secondary);
        prop_assert!(p.keep.is_disjoint(&p.moved));
        prop_assert!(!p.keep.contains(&p.new_ragent) && !p.moved.contains(&p.new_ragent));
        let mut all: BTreeSet<NodeId> = p.keep.union(&p.moved).copied().collect();
        all.insert(p.new_ragent);
        prop_assert_eq!(&all, &m);
        prop_assert!(p.keep.len() - p.moved.len() <= 1);
    }
}

// ---- placement and results ----

proptest! {
    #[test]
    fn greedy_placement_keeps_loads_within_one(agents in 2u32..40, inserts in 0usize..400) {
        let mut loads = AgentLoadTable::new();
        for a in 0..agents {
            loads.add_agent(NodeId(a));
        }
        for _ in 0..inserts {
            let (owner, other) = select_replica_holders(&loads).unwrap();
            prop_assert_ne!(owner, other);
            loads.increment(owner);
            loads.increment(other);
        }
        let counts: Vec<u64> = loads.iter().map(|(_, c)| c).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(counts.iter().sum::<u64>(), 2 * inserts as u64);
    }

    #[test]
    fn merged_results_are_the_deduplicated_union(parts in prop::collection::vec(prop::collection::vec(object(), 0..10), 0..6)) {
        let merged = merge_results(parts.clone());
        let want: BTreeSet<ObjectId> = parts.iter().flatten().map(|o| o.id).collect();
        let got: Vec<ObjectId> = merged.iter().map(|o| o.id).collect();
        prop_assert_eq!(got, want.into_iter().collect::<Vec<_>>());
    }
}

// ---- accounting ----

/// One cluster's share of a search: M keys scanned, P matches each probed
/// once in a store of the given size, every match fetched back.
#[derive(Debug, Clone)]
struct Share {
    keys: u64,
    stores: Vec<u64>,
}

fn share() -> impl Strategy<Value = Share> {
    (1u64..40, prop::collection::vec(1u64..600, 0..12)).prop_map(|(keys, stores)| Share { keys, stores })
}

fn record(c: &mut StepCounter, req: RequestId, ragent: NodeId, s: &Share) {
    let p = s.stores.len() as u64;
    c.record(req, ragent, &StepEvent::Lookup { key_count: s.keys, key_steps: s.keys, matches: p });
    for (i, l) in s.stores.iter().enumerate() {
        c.record(req, ragent, &StepEvent::FetchRequest { holder: NodeId(1000 + i as u32 % 3) });
        c.record(req, ragent, &StepEvent::Probe { store_len: *l });
    }
    if p > 0 {
        c.record(req, ragent, &StepEvent::FetchReceived { objects: p });
    }
}

proptest! {
    #[test]
    fn decomposition_reconstructs_the_measured_count(shares in prop::collection::vec(share(), 1..8)) {
        let mut c = StepCounter::new();
        let req = RequestId(7);
        for (i, s) in shares.iter().enumerate() {
            record(&mut c, req, NodeId(i as u32), s);
        }
        let a = c.account_search(req).unwrap();
        // M + per match (id + owner + fetch out and back) + ⌈log2 L⌉
        let oracle: u64 = shares
            .iter()
            .map(|s| s.keys + s.stores.iter().map(|l| 4 + (*l as f64).log2().ceil().max(1.0) as u64).sum::<u64>())
            .sum();
        prop_assert_eq!(a.measured, oracle);
        prop_assert_eq!(a.decomposed, a.measured);
        prop_assert_eq!(a.clusters, shares.len());
        prop_assert_eq!(a.bound.is_some(), shares.iter().all(|s| !s.stores.is_empty()));
    }

    #[test]
    fn bound_holds_when_keys_outweigh_store_depth(shares in prop::collection::vec(share(), 1..8)) {
        let mut c = StepCounter::new();
        let req = RequestId(9);
        for (i, s) in shares.iter().enumerate() {
            record(&mut c, req, NodeId(i as u32), s);
        }
        let a = c.account_search(req).unwrap();
        let deep_enough = shares.iter().all(|s| {
            let l = s.stores.iter().map(|x| ceil_log2(*x)).max().unwrap_or(1);
            4 * (s.keys - 1) >= l
        });
        if let (Some(b), true) = (a.bound, deep_enough) {
            prop_assert!(a.measured <= b, "measured {} bound {}", a.measured, b);
        }
    }
}

#[test]
fn single_key_catalogue_exceeds_the_bound() {
    // M=1, P=2 in stores of 8 (l=3): 1 + 2·4 + 2·3 = 15 > 1·(4·2 + 3) = 11
    let mut c = StepCounter::new();
    let req = RequestId(1);
    record(&mut c, req, NodeId(0), &Share { keys: 1, stores: vec![8, 8] });
    let a = c.account_search(req).unwrap();
    assert_eq!(a.measured, 15);
    assert_eq!(a.bound, Some(11));
}

#[test]
fn catalogue_entries_keep_versions_through_split_and_merge() {
    let mut c = MetaCatalogue::new();
    let o = DistObject::new("Doc", ["k1"], b"x".to_vec());
    c.insert_entry(CatalogueEntry {
        meta: ObjectMeta::of(&o),
        holders: HolderList::new(vec![NodeId(1), NodeId(2)]).unwrap(),
        version: 4,
    })
    .unwrap();
    let (a, b) = c.split(&[NodeId(2)].into(), &[NodeId(1)].into());
    assert!(a.is_empty());
    let back = a.merge(b).unwrap();
    assert_eq!(back.entry(o.id).unwrap().version, 4);
}
