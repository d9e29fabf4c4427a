//! Metrics output: one record per line, `kind key=value ...`, keys in a
//! fixed order per record kind.

use std::fmt::Write as _;

use super::run::Outcome;
use crate::protocol::{ClientOp, Detail, Reply};
use crate::sim::Simulation;
use crate::types::ObjectId;

pub fn render(o: &Outcome) -> String {
    let sim = &o.sim;
    let stats = sim.stats();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "run seed={} end_us={} events={} messages={} peer_messages={} dropped={} bounced={}",
        sim.config().seed,
        o.end,
        sim.events_processed(),
        stats.total,
        stats.peer_total,
        stats.dropped,
        stats.bounced
    );
    for op in sim.ops().values() {
        let Some(done) = op.completed else { continue };
        let label = match &op.op {
            ClientOp::Insert(obj) => label(o, obj.id),
            ClientOp::Update { id, .. } | ClientOp::Read { id } => label(o, *id),
            ClientOp::Search { .. } => "-".to_string(),
        };
        let outcome = op.reply.as_ref().map_or("none", Reply::outcome);
        let _ = write!(
            s,
            "op req={} kind={} label={} client={} via={} submitted_us={} completed_us={} outcome={} messages={} peer_messages={} hops={}",
            op.req,
            op.op.kind(),
            label,
            sim.name(op.client),
            sim.name(op.agent),
            op.submitted,
            done,
            outcome,
            stats.for_request(op.req),
            stats.peer_for_request(op.req),
            stats.hops_for(op.req)
        );
        if let ClientOp::Search { .. } = op.op {
            let results = match &op.reply {
                Some(Reply::Found(v)) => v.len(),
                Some(Reply::First(Some(_))) => 1,
                _ => 0,
            };
            match sim.steps().account_search(op.req) {
                Ok(a) => {
                    let bound = a.bound.map_or("-".to_string(), |b| b.to_string());
                    let _ = write!(
                        s,
                        " steps={} bound={} decomposed={} clusters={} results={}",
                        a.measured, bound, a.decomposed, a.clusters, results
                    );
                }
                Err(_) => {
                    let _ = write!(s, " steps=0 bound=- decomposed=0 clusters=0 results={results}");
                }
            }
        }
        s.push('\n');
    }
    for l in sim.loss_log() {
        let _ = writeln!(
            s,
            "lost label={} time_us={} cluster={}",
            label(o, l.id),
            l.time,
            sim.name(l.cluster)
        );
    }
    for m in sim.member_log() {
        let _ = write!(
            s,
            "member time_us={} event={} cluster={} node={}",
            m.time,
            m.kind.as_str(),
            sim.name(m.cluster),
            sim.name(m.node)
        );
        for (k, d) in &m.detail {
            let _ = match d {
                Detail::Node(n) => write!(s, " {k}={}", sim.name(*n)),
                Detail::Num(n) => write!(s, " {k}={n}"),
                Detail::Text(t) => write!(s, " {k}={t}"),
            };
        }
        s.push('\n');
    }
    census(&mut s, o, sim);
    for (kind, n) in &stats.by_kind {
        let _ = writeln!(s, "messages kind={kind} count={n}");
    }
    s
}

fn census(s: &mut String, o: &Outcome, sim: &Simulation) {
    let ragents = sim.live_ragents();
    let agents = sim.live_agents();
    for r in &ragents {
        let Some(ra) = sim.peer(*r).and_then(|p| p.ragent.as_ref()) else {
            continue;
        };
        let cl = &ra.cluster;
        let _ = writeln!(
            s,
            "cluster ragent={} size={} objects={} secondary={}",
            sim.name(*r),
            cl.members.len(),
            cl.catalogue.len(),
            cl.secondary.map_or("-", |x| sim.name(x))
        );
    }
    let replicas: usize = agents
        .iter()
        .filter_map(|a| sim.peer(*a))
        .map(|p| p.store.len())
        .sum();
    let lost = sim.lost_objects();
    let unexpected = lost.iter().filter(|id| !o.expected_lost.contains(id)).count();
    let _ = writeln!(
        s,
        "census ragents={} agents={} objects={} replicas={} lost={} unexpected_lost={} violations={}",
        ragents.len(),
        agents.len(),
        sim.catalogued().len(),
        replicas,
        lost.len(),
        unexpected,
        o.violations.len()
    );
}

fn label(o: &Outcome, id: ObjectId) -> String {
    o.label_of(id).map_or_else(|| id.short(), str::to_string)
}
