//! Lookup-and-discovery services: replicated registries of live RAgents.
//!
//! Each instance keeps a last-writer-wins map with tombstones and pushes
//! every local change to its siblings, so all instances converge once the
//! pushes drain.

use std::collections::BTreeMap;

use crate::membership::Candidate;
use crate::protocol::{AccessDenied, Ctx, Envelope, Message};
use crate::sim::SimTime;
use crate::types::{LocalityDescriptor, NodeId, Role};

/// Write order: time, then the instance that accepted the write, then its
/// local sequence number.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct Stamp {
    pub time: SimTime,
    pub origin: NodeId,
    pub seq: u64,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LusRecord {
    pub ragent: NodeId,
    pub locality: Option<LocalityDescriptor>,
    pub connected: usize,
    pub stamp: Stamp,
    pub live: bool,
}

#[derive(Clone, Default, PartialEq, Eq, Debug)]
pub struct LusRegistry {
    entries: BTreeMap<NodeId, LusRecord>,
}

impl LusRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps whichever record carries the later stamp. Returns whether
    /// `record` was taken.
    pub fn apply(&mut self, record: LusRecord) -> bool {
        match self.entries.get(&record.ragent) {
            Some(cur) if cur.stamp >= record.stamp => false,
            _ => {
                self.entries.insert(record.ragent, record);
                true
            }
        }
    }

    pub fn register(
        &mut self,
        ragent: NodeId,
        locality: LocalityDescriptor,
        connected: usize,
        stamp: Stamp,
    ) -> LusRecord {
        let rec = LusRecord {
            ragent,
            locality: Some(locality),
            connected,
            stamp,
            live: true,
        };
        self.apply(rec.clone());
        rec
    }

    pub fn deregister(&mut self, ragent: NodeId, stamp: Stamp) -> LusRecord {
        let rec = LusRecord {
            ragent,
            locality: None,
            connected: 0,
            stamp,
            live: false,
        };
        self.apply(rec.clone());
        rec
    }

    pub fn contains(&self, ragent: NodeId) -> bool {
        self.entries.get(&ragent).is_some_and(|r| r.live)
    }

    pub fn len(&self) -> usize {
        self.entries.values().filter(|r| r.live).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Live entries; only Agents may ask.
    pub fn query(&self, requester: Role) -> Result<Vec<Candidate>, AccessDenied> {
        if requester == Role::Client {
            return Err(AccessDenied);
        }
        Ok(self
            .entries
            .values()
            .filter(|r| r.live)
            .map(|r| Candidate {
                ragent: r.ragent,
                locality: r.locality.clone().expect("live records carry a locality"),
                connected: r.connected,
            })
            .collect())
    }

    /// Live entries as (RAgent, connected count), for comparisons.
    pub fn live(&self) -> Vec<(NodeId, usize)> {
        self.entries
            .values()
            .filter(|r| r.live)
            .map(|r| (r.ragent, r.connected))
            .collect()
    }
}

/// One lookup service instance.
#[derive(Clone, Debug)]
pub struct LusState {
    pub registry: LusRegistry,
    pub siblings: Vec<NodeId>,
    seq: u64,
}

impl LusState {
    pub fn new(siblings: Vec<NodeId>) -> Self {
        Self {
            registry: LusRegistry::new(),
            siblings,
            seq: 0,
        }
    }

    fn stamp(&mut self, ctx: &Ctx) -> Stamp {
        self.seq += 1;
        Stamp {
            time: ctx.now,
            origin: ctx.me,
            seq: self.seq,
        }
    }

    fn push(&self, ctx: &mut Ctx, record: LusRecord) {
        for s in &self.siblings {
            ctx.send(
                *s,
                Message::LusReplicate {
                    records: vec![record.clone()],
                },
            );
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, env: Envelope) {
        match env.msg {
            Message::LusRegister {
                ragent,
                locality,
                connected,
            } => {
                let stamp = self.stamp(ctx);
                let rec = self.registry.register(ragent, locality, connected, stamp);
                self.push(ctx, rec);
            }
            Message::LusDeregister { ragent } => {
                let stamp = self.stamp(ctx);
                let rec = self.registry.deregister(ragent, stamp);
                self.push(ctx, rec);
            }
            Message::LusQuery { purpose } => {
                let result = self.registry.query(env.src_role);
                ctx.send(env.src, Message::LusQueryReply { purpose, result });
            }
            Message::LusReplicate { records } => {
                for r in records {
                    self.registry.apply(r);
                }
            }
            _ => {}
        }
    }
}
