//! Message statistics and the event trace.
//!
//! A trace line is `time seq node kind payload-digest`, with time in
//! microseconds and the digest over the message's debug rendering, which is
//! deterministic because every collection in a message is ordered.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::SimTime;
use crate::node::payload_digest;
use crate::protocol::{Message, RequestId};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MessageStats {
    pub total: u64,
    pub by_kind: BTreeMap<&'static str, u64>,
    pub by_request: BTreeMap<RequestId, u64>,
    /// Inter-RAgent messages per request.
    pub peer_by_request: BTreeMap<RequestId, u64>,
    pub peer_total: u64,
    /// Deepest causal hop seen per request.
    pub hops: BTreeMap<RequestId, u32>,
    pub dropped: u64,
    pub bounced: u64,
}

impl MessageStats {
    pub fn record(&mut self, msg: &Message, req: Option<RequestId>, hop: u32) {
        self.total += 1;
        *self.by_kind.entry(msg.kind()).or_default() += 1;
        let peer = msg.is_inter_ragent();
        if peer {
            self.peer_total += 1;
        }
        if let Some(r) = req {
            *self.by_request.entry(r).or_default() += 1;
            if peer {
                *self.peer_by_request.entry(r).or_default() += 1;
            }
            let h = self.hops.entry(r).or_default();
            *h = (*h).max(hop);
        }
    }

    pub fn for_request(&self, req: RequestId) -> u64 {
        self.by_request.get(&req).copied().unwrap_or(0)
    }

    pub fn peer_for_request(&self, req: RequestId) -> u64 {
        self.peer_by_request.get(&req).copied().unwrap_or(0)
    }

    pub fn hops_for(&self, req: RequestId) -> u32 {
        self.hops.get(&req).copied().unwrap_or(0)
    }
}

pub fn message_digest(msg: &Message) -> String {
    format!("{:016x}", payload_digest(format!("{msg:?}").as_bytes()))
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    enabled: bool,
    lines: Vec<String>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            lines: Vec::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, time: SimTime, seq: u64, node: &str, kind: &str, digest: &str) {
        if self.enabled {
            self.lines.push(format!("{time} {seq} {node} {kind} {digest}"));
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(s, "{l}");
        }
        s
    }
}
