//! Search step accounting.
//!
//! Every counted step belongs to one operation class: key comparisons in the
//! catalogue, id retrieval, owner lookup, fetch (request and reply), and the
//! replica probe inside an Agent's store. Tallies are kept per request and
//! per cluster so that the per-cluster symbols M, P and L are observable.

use std::collections::{BTreeMap, BTreeSet};

use crate::protocol::RequestId;
use crate::types::NodeId;

/// ⌈log2 x⌉, with values below 2 counted as 1.
pub fn ceil_log2(x: u64) -> u64 {
    if x < 2 {
        1
    } else {
        u64::from(64 - (x - 1).leading_zeros())
    }
}

/// One accountable event reported by a node while serving a search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepEvent {
    /// Catalogue lookup at the cluster's RAgent.
    Lookup {
        key_count: u64,
        key_steps: u64,
        matches: u64,
    },
    /// Fetch request sent to one holder.
    FetchRequest { holder: NodeId },
    /// An Agent located one replica in a store of `store_len` objects.
    Probe { store_len: u64 },
    /// Objects received back at the RAgent.
    FetchReceived { objects: u64 },
}

/// Tallies for one cluster's share of one search.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClusterTally {
    /// Distinct keys in the catalogue (M).
    pub key_count: u64,
    pub key_steps: u64,
    /// Matching objects (P).
    pub matches: u64,
    pub id_steps: u64,
    pub owner_steps: u64,
    pub fetch_steps: u64,
    pub fetch_requests: u64,
    pub holders: BTreeSet<NodeId>,
    pub probe_steps: u64,
    /// Store size at each probe (L per served object).
    pub store_sizes: Vec<u64>,
}

impl ClusterTally {
    pub fn measured(&self) -> u64 {
        self.key_steps + self.id_steps + self.owner_steps + self.fetch_steps + self.probe_steps
    }

    /// Key steps + 4P + Σ ⌈log2 L⌉, rebuilt from recorded parameters.
    pub fn decomposed(&self) -> u64 {
        self.key_steps
            + 4 * self.matches
            + self.store_sizes.iter().map(|l| ceil_log2(*l)).sum::<u64>()
    }

    pub fn max_store(&self) -> u64 {
        self.store_sizes.iter().copied().max().unwrap_or(0)
    }

    /// M·(4P + ⌈log2 L⌉) with L the largest probed store.
    pub fn bound(&self) -> u64 {
        self.key_count * (4 * self.matches + ceil_log2(self.max_store()))
    }

    fn apply(&mut self, event: &StepEvent) {
        match event {
            StepEvent::Lookup {
                key_count,
                key_steps,
                matches,
            } => {
                self.key_count = (*key_count).max(self.key_count);
                self.key_steps += key_steps;
                self.matches += matches;
                self.id_steps += matches;
                self.owner_steps += matches;
            }
            StepEvent::FetchRequest { holder } => {
                self.fetch_requests += 1;
                self.holders.insert(*holder);
            }
            StepEvent::Probe { store_len } => {
                self.probe_steps += ceil_log2(*store_len);
                self.store_sizes.push(*store_len);
            }
            StepEvent::FetchReceived { objects } => self.fetch_steps += 2 * objects,
        }
    }
}

/// Step totals for one completed search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchAccount {
    pub measured: u64,
    /// Σ over clusters of M·(4P + ⌈log2 L⌉); `None` unless every cluster
    /// that took part has M ≥ 1 and P ≥ 1.
    pub bound: Option<u64>,
    pub decomposed: u64,
    /// Number of clusters that performed a lookup (R).
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no step tallies for request {0}")]
pub struct UnknownRequest(pub RequestId);

#[derive(Debug, Clone, Default)]
pub struct StepCounter {
    tallies: BTreeMap<RequestId, BTreeMap<NodeId, ClusterTally>>,
}

impl StepCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, req: RequestId, ragent: NodeId, event: &StepEvent) {
        self.tallies
            .entry(req)
            .or_default()
            .entry(ragent)
            .or_default()
            .apply(event);
    }

    pub fn clusters(&self, req: RequestId) -> Option<&BTreeMap<NodeId, ClusterTally>> {
        self.tallies.get(&req)
    }

    pub fn account_search(&self, req: RequestId) -> Result<SearchAccount, UnknownRequest> {
        let clusters = self.tallies.get(&req).ok_or(UnknownRequest(req))?;
        let eligible = clusters.values().all(|c| c.key_count >= 1 && c.matches >= 1);
        Ok(SearchAccount {
            measured: clusters.values().map(ClusterTally::measured).sum(),
            bound: eligible.then(|| clusters.values().map(ClusterTally::bound).sum()),
            decomposed: clusters.values().map(ClusterTally::decomposed).sum(),
            clusters: clusters.len(),
        })
    }
}

/// B·(4 + log2(2B/N)) for the uniform idealization, rounded up.
pub fn ideal_closed_form(objects: u64, agents: u64) -> u64 {
    objects * (4 + ceil_log2((2 * objects).div_ceil(agents)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_values() {
        let cases = [(0, 1), (1, 1), (2, 1), (3, 2), (4, 2), (5, 3), (8, 3), (9, 4), (1024, 10)];
        for (x, want) in cases {
            assert_eq!(ceil_log2(x), want, "x={x}");
        }
        for x in 2..5000u64 {
            let f = (x as f64).log2().ceil() as u64;
            assert_eq!(ceil_log2(x), f, "x={x}");
        }
    }

    #[test]
    fn single_cluster_example() {
        // R=1, M=3 scanned, P=2, both replicas probed in stores of 8.
        let mut c = StepCounter::new();
        let r = RequestId(1);
        let ra = NodeId(0);
        c.record(r, ra, &StepEvent::Lookup { key_count: 3, key_steps: 3, matches: 2 });
        c.record(r, ra, &StepEvent::FetchRequest { holder: NodeId(1) });
        c.record(r, ra, &StepEvent::Probe { store_len: 8 });
        c.record(r, ra, &StepEvent::Probe { store_len: 8 });
        c.record(r, ra, &StepEvent::FetchReceived { objects: 2 });
        let a = c.account_search(r).unwrap();
        assert_eq!(a.measured, 3 + 8 + 2 * 3);
        assert_eq!(a.decomposed, a.measured);
        assert_eq!(a.bound, Some(3 * (8 + 3)));
    }

    #[test]
    fn no_match_counts_keys_only() {
        let mut c = StepCounter::new();
        let r = RequestId(2);
        c.record(r, NodeId(0), &StepEvent::Lookup { key_count: 5, key_steps: 5, matches: 0 });
        c.record(r, NodeId(1), &StepEvent::Lookup { key_count: 4, key_steps: 4, matches: 0 });
        let a = c.account_search(r).unwrap();
        assert_eq!(a.measured, 9);
        assert_eq!(a.bound, None);
        assert_eq!(c.account_search(RequestId(3)), Err(UnknownRequest(RequestId(3))));
    }

    #[test]
    fn closed_form_arithmetic() {
        assert_eq!(ideal_closed_form(1024, 64), 9216);
        assert_eq!(ideal_closed_form(64, 16), 64 * 7);
        assert_eq!(ideal_closed_form(256, 64), 256 * 7);
    }
}
