//! Latency model: a base delay, a surcharge per proximity tier the two
//! endpoints do not share, and a fixed per-pair jitter.

use sha2::{Digest, Sha256};

use super::SimTime;
use crate::types::{proximity_rank, LocalityDescriptor};

/// Number of locality tiers (continent, country, AS, network).
const TIERS: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatencyModel {
    pub base: SimTime,
    pub per_tier: SimTime,
    /// Upper bound (inclusive) of the per-pair jitter.
    pub jitter: SimTime,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            base: 5_000,
            per_tier: 10_000,
            jitter: 2_000,
        }
    }
}

impl LatencyModel {
    /// One-way delay between two physical nodes, never zero. The jitter
    /// depends only on the seed and the directed pair, so a link is FIFO.
    pub fn delay(
        &self,
        seed: u64,
        src_phys: usize,
        dst_phys: usize,
        src: &LocalityDescriptor,
        dst: &LocalityDescriptor,
    ) -> SimTime {
        let missing = u64::from(TIERS - proximity_rank(src, dst).min(TIERS));
        (self.base + missing * self.per_tier + self.jitter_for(seed, src_phys, dst_phys)).max(1)
    }

    fn jitter_for(&self, seed: u64, src: usize, dst: usize) -> SimTime {
        if self.jitter == 0 {
            return 0;
        }
        let mut h = Sha256::new();
        h.update(seed.to_be_bytes());
        h.update((src as u64).to_be_bytes());
        h.update((dst as u64).to_be_bytes());
        let d = h.finalize();
        let x = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
        x % (self.jitter + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(n: &str, a: &str, c: &str, k: &str) -> LocalityDescriptor {
        LocalityDescriptor::new(n, a, c, k).unwrap()
    }

    #[test]
    fn tiers_add_latency() {
        let m = LatencyModel {
            jitter: 0,
            ..LatencyModel::default()
        };
        let a = loc("n1", "as1", "fr", "eu");
        assert_eq!(m.delay(1, 0, 1, &a, &a), 5_000);
        assert_eq!(m.delay(1, 0, 1, &a, &loc("n2", "as1", "fr", "eu")), 15_000);
        assert_eq!(m.delay(1, 0, 1, &a, &loc("n1", "as1", "de", "eu")), 35_000);
        assert_eq!(m.delay(1, 0, 1, &a, &loc("n1", "as1", "fr", "na")), 45_000);
    }

    #[test]
    fn jitter_is_bounded_and_stable() {
        let m = LatencyModel::default();
        let a = loc("n1", "as1", "fr", "eu");
        for s in 0..50 {
            for p in 0..10 {
                let d = m.delay(s, p, p + 1, &a, &a);
                assert!((5_000..=7_000).contains(&d));
                assert_eq!(d, m.delay(s, p, p + 1, &a, &a));
            }
        }
    }
}
