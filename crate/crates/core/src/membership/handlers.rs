//! Membership message handlers: joins, heartbeats, failure handling,
//! promotion of the secondary, split, merge and the RAgent peer graph.

use std::collections::BTreeSet;

use super::{detect_failures, elect_agent, join_select_ragent, select_merge_target, Candidate, ClusterState, ReplicaAction, Repair};
use crate::node::{PeerState, RAgentState, Reconfig};
use crate::protocol::{ClusterView, Ctx, Detail, Effect, MemberKind, Message, QueryPurpose, Timer};
use crate::types::NodeId;

/// Join attempts before a node stops asking the lookup services.
const MAX_JOIN_ATTEMPTS: u32 = 50;

impl PeerState {
    pub(crate) fn ra(&mut self) -> &mut RAgentState {
        self.ragent.as_mut().expect("called on an RAgent")
    }

    pub(crate) fn lus_register(&mut self, ctx: &mut Ctx) {
        let connected = self.ra().cluster.size();
        ctx.send(
            ctx.env.nearest_lus,
            Message::LusRegister {
                ragent: ctx.me,
                locality: ctx.env.locality.clone(),
                connected,
            },
        );
    }

    fn lus_deregister(&self, ctx: &mut Ctx, ragent: NodeId) {
        ctx.send(ctx.env.nearest_lus, Message::LusDeregister { ragent });
    }

    /// Pushes the current view to every member.
    pub(crate) fn send_config(&mut self, ctx: &mut Ctx, failover_from: Option<NodeId>) {
        let view = self.ra().view();
        for m in &view.members {
            ctx.send(
                *m,
                Message::ClusterConfig {
                    view: view.clone(),
                    failover_from,
                },
            );
        }
    }

    /// Sends the replica movements of a repair plan and reports losses.
    pub(crate) fn execute_repair(&mut self, ctx: &mut Ctx, repair: Repair) {
        let me = ctx.me;
        for action in repair.actions {
            match action {
                ReplicaAction::Copy { id, source, target } => {
                    if source == me {
                        if let Some(r) = self.store.get(&id) {
                            ctx.send(
                                target,
                                Message::StoreReplica {
                                    obj: r.obj.clone(),
                                    ack_to: None,
                                },
                            );
                        }
                    } else {
                        ctx.send(
                            source,
                            Message::CopyReplica {
                                id,
                                target,
                                ack_to: me,
                            },
                        );
                    }
                    self.copy_started(ctx, id, target);
                }
                ReplicaAction::Drop { id, holder } => {
                    ctx.send(holder, Message::DropReplica { id });
                }
            }
        }
        for id in repair.lost {
            ctx.effect(Effect::Lost { id, cluster: me });
            self.object_lost(ctx, id);
        }
    }

    fn check_size(&mut self, ctx: &mut Ctx) {
        let t = ctx.config.thresholds;
        let r = self.ra();
        if r.reconfig != Reconfig::Idle {
            return;
        }
        if r.cluster.size() > t.max_cluster {
            r.reconfig = Reconfig::SplitWanted;
        } else if r.shrunk && r.cluster.size() < t.min_cluster && !r.cluster.peers.is_empty() {
            r.reconfig = Reconfig::MergeWanted;
        }
    }

    // ---- timers ----

    pub(crate) fn on_tick(&mut self, ctx: &mut Ctx) {
        let hb = ctx.config.heartbeat;
        if !hb.enabled() {
            return;
        }
        ctx.timer(hb.period - ctx.now % hb.period, Timer::Tick);
        if self.is_ragent() {
            self.ragent_tick(ctx);
        } else if let Some(r) = self.view.as_ref().map(|v| v.ragent) {
            ctx.send(r, Message::Heartbeat);
            if ctx.now.saturating_sub(self.last_heard) > hb.failure_timeout {
                self.suspect(ctx, r);
            }
        }
    }

    fn ragent_tick(&mut self, ctx: &mut Ctx) {
        let timeout = ctx.config.heartbeat.failure_timeout;
        let r = self.ra();
        let view = r.view();
        let catalogue = r.cluster.catalogue.len();
        let members = r.cluster.size();
        for m in &view.members {
            ctx.send(*m, Message::RAgentHeartbeat { view: view.clone() });
        }
        for p in &r.cluster.peers {
            ctx.send(*p, Message::PeerHeartbeat { catalogue, members });
        }
        let failed = detect_failures(&r.last_seen, ctx.now, timeout);
        let gone = detect_failures(&r.peer_seen, ctx.now, timeout);
        for f in failed {
            self.agent_failed(ctx, f, MemberKind::Remove, "heartbeat");
        }
        for p in gone {
            self.peer_gone(ctx, p);
            self.lus_deregister(ctx, p);
        }
        self.check_size(ctx);
    }

    pub(crate) fn on_bootstrap_timer(&mut self, ctx: &mut Ctx) {
        if self.is_ragent() {
            ctx.send(
                ctx.env.nearest_lus,
                Message::LusQuery {
                    purpose: QueryPurpose::Bootstrap,
                },
            );
        }
    }

    pub(crate) fn on_merge_retry(&mut self, ctx: &mut Ctx) {
        if self.is_ragent() {
            self.check_size(ctx);
        }
    }

    // ---- join ----

    pub(crate) fn start_join(&mut self, ctx: &mut Ctx) {
        if self.is_ragent() || (self.view.is_some() && !self.join.active) {
            return;
        }
        if let Some(t) = self.join.target {
            // Still waiting on an RAgent: ask it again. A dead one bounces.
            ctx.send(
                t,
                Message::Join {
                    previous: self.join.previous,
                },
            );
            self.arm_join_retry(ctx);
            return;
        }
        if self.join.attempts >= MAX_JOIN_ATTEMPTS {
            self.join.active = false;
            return;
        }
        self.join.active = true;
        self.join.attempts += 1;
        if let (Some(prev), Some(old)) = (self.join.previous, self.join.previous_ragent.take()) {
            ctx.send(old, Message::AgentLeft { node: prev });
        }
        ctx.send(
            ctx.env.nearest_lus,
            Message::LusQuery {
                purpose: QueryPurpose::Join,
            },
        );
    }

    fn arm_join_retry(&self, ctx: &mut Ctx) {
        let hb = ctx.config.heartbeat;
        if hb.enabled() {
            ctx.timer(hb.failure_timeout, Timer::Join);
        }
    }

    fn on_join_candidates(&mut self, ctx: &mut Ctx, candidates: Vec<Candidate>) {
        if !self.join.active || self.join.target.is_some() {
            return;
        }
        let me = ctx.me;
        let open: Vec<Candidate> = candidates
            .into_iter()
            .filter(|c| c.ragent != me && !self.join.excluded.contains(&c.ragent))
            .collect();
        match join_select_ragent(&open, &ctx.env.locality) {
            Ok(t) => {
                self.join.target = Some(t);
                ctx.send(
                    t,
                    Message::Join {
                        previous: self.join.previous,
                    },
                );
                self.arm_join_retry(ctx);
            }
            Err(_) => {
                self.join.excluded.clear();
                ctx.timer(ctx.config.bootstrap, Timer::Join);
            }
        }
    }

    pub(crate) fn on_join_accepted(&mut self, ctx: &mut Ctx, src: NodeId, view: ClusterView) {
        if self.is_ragent() || !self.join.active || self.join.target != Some(src) {
            return;
        }
        self.join = Default::default();
        self.view = Some(view);
        self.last_heard = ctx.now;
        self.voted_against = None;
        self.resend_outstanding(ctx);
    }

    pub(crate) fn on_join_refused(&mut self, ctx: &mut Ctx, src: NodeId) {
        if self.join.active && self.join.target == Some(src) {
            self.join.excluded.insert(src);
            self.join.target = None;
            self.start_join(ctx);
        }
    }

    pub(crate) fn on_join(&mut self, ctx: &mut Ctx, src: NodeId, previous: Option<NodeId>) {
        let me = ctx.me;
        let thresholds = ctx.config.thresholds;
        if self.ra().reconfig != Reconfig::Idle {
            self.ra().deferred.push_back((src, Message::Join { previous }));
            return;
        }
        if let Some(p) = previous {
            let r = self.ra();
            if r.cluster.members.contains(&p) {
                self.agent_failed(ctx, p, MemberKind::Left, "rejoined");
            } else if r.cluster.peers.contains(&p) {
                self.peer_gone(ctx, p);
                self.lus_deregister(ctx, p);
            }
        }
        let r = self.ra();
        if r.cluster.members.contains(&src) {
            ctx.send(src, Message::JoinAccepted { view: r.view() });
            return;
        }
        if src == me {
            return;
        }
        let Ok(outcome) = r.cluster.admit(src, &thresholds) else {
            return;
        };
        r.last_seen.insert(src, ctx.now);
        let view = r.view();
        let size = r.cluster.size() as u64;
        if outcome.split_needed {
            r.reconfig = Reconfig::SplitWanted;
        }
        ctx.send(src, Message::JoinAccepted { view });
        ctx.member(MemberKind::Admit, me, src, vec![("members", Detail::Num(size))]);
        if outcome.new_secondary {
            ctx.member(MemberKind::Secondary, me, src, Vec::new());
        }
        self.execute_repair(ctx, outcome.repair);
        self.lus_register(ctx);
    }

    pub(crate) fn on_agent_left(&mut self, ctx: &mut Ctx, node: NodeId) {
        if self.ra().cluster.members.contains(&node) {
            self.agent_failed(ctx, node, MemberKind::Left, "rejoined");
        }
    }

    // ---- views ----

    pub(crate) fn on_ragent_heartbeat(&mut self, ctx: &mut Ctx, src: NodeId, view: ClusterView) {
        if self.is_ragent() || self.view.as_ref().map(|v| v.ragent) != Some(src) {
            return;
        }
        if view.secondary != Some(ctx.me) {
            self.backup = None;
        }
        self.view = Some(view);
    }

    pub(crate) fn on_cluster_config(
        &mut self,
        ctx: &mut Ctx,
        src: NodeId,
        view: ClusterView,
        failover_from: Option<NodeId>,
    ) {
        if self.is_ragent() || view.ragent != src || !view.members.contains(&ctx.me) {
            return;
        }
        if self.merged_into.as_ref().is_some_and(|(t, _)| *t == src) {
            self.merged_into = None;
        }
        if view.secondary != Some(ctx.me) {
            self.backup = None;
        }
        self.view = Some(view);
        self.last_heard = ctx.now;
        self.voted_against = None;
        self.join = Default::default();
        if failover_from.is_some() && !self.store.is_empty() {
            let versions = self.store.values().map(|r| (r.obj.id, r.obj.version)).collect();
            ctx.send(src, Message::ReplicaVersions { versions });
        }
        self.resend_outstanding(ctx);
    }

    // ---- RAgent failure ----

    /// The current RAgent looks dead.
    pub(crate) fn suspect(&mut self, ctx: &mut Ctx, ragent: NodeId) {
        let me = ctx.me;
        let Some(view) = self.view.clone() else {
            return;
        };
        if view.ragent != ragent || self.voted_against == Some(ragent) || self.merged_into.is_some() {
            return;
        }
        match view.secondary {
            Some(s) if s == me => self.promote(ctx, ragent),
            Some(s) => {
                let vote = elect_agent(view.members.iter().filter(|m| **m != s)).ok();
                ctx.send(
                    s,
                    Message::RAgentDown {
                        failed: ragent,
                        vote,
                    },
                );
                let mut detail = vec![("secondary", Detail::Node(s))];
                if let Some(v) = vote {
                    detail.push(("vote", Detail::Node(v)));
                }
                ctx.member(MemberKind::Vote, ragent, me, detail);
                self.voted_against = Some(ragent);
            }
            None => self.cluster_lost(ctx, ragent),
        }
    }

    pub(crate) fn on_ragent_down(
        &mut self,
        ctx: &mut Ctx,
        _src: NodeId,
        failed: NodeId,
        _vote: Option<NodeId>,
    ) {
        let me = ctx.me;
        let Some(view) = self.view.as_ref() else {
            return;
        };
        if !self.is_ragent() && view.ragent == failed && view.secondary == Some(me) {
            self.promote(ctx, failed);
        }
    }

    /// The secondary takes over from a crashed RAgent.
    fn promote(&mut self, ctx: &mut Ctx, old: NodeId) {
        let me = ctx.me;
        let Some(backup) = self.backup.take() else {
            self.cluster_lost(ctx, old);
            return;
        };
        let (state, repair) = ClusterState::promote(backup, me);
        self.ragent = Some(Box::new(RAgentState::new(
            state,
            ctx.config.migration_threshold,
            ctx.now,
        )));
        self.view = None;
        self.voted_against = None;
        self.send_config(ctx, Some(old));
        self.execute_repair(ctx, repair);
        let own: Vec<_> = self.store.values().map(|r| r.obj.clone()).collect();
        for obj in own {
            for h in self.adopt_version(obj.id, obj.version) {
                ctx.send(
                    h,
                    Message::StoreReplica {
                        obj: obj.clone(),
                        ack_to: None,
                    },
                );
            }
        }
        self.store.clear();
        self.applied.clear();
        self.lus_register(ctx);
        self.lus_deregister(ctx, old);
        let peers: Vec<NodeId> = self.ra().cluster.peers.iter().copied().collect();
        for p in peers {
            ctx.send(p, Message::PeerHello { replaces: Some(old) });
        }
        let secondary = self.ra().cluster.secondary;
        let mut detail = vec![("replaces", Detail::Node(old))];
        if let Some(s) = secondary {
            detail.push(("secondary", Detail::Node(s)));
        }
        ctx.member(MemberKind::Promote, me, me, detail);
        self.resend_outstanding(ctx);
    }

    /// Both the RAgent and its secondary are gone: the cluster's catalogue
    /// is lost and this node starts over.
    fn cluster_lost(&mut self, ctx: &mut Ctx, old: NodeId) {
        ctx.member(
            MemberKind::ClusterLost,
            old,
            ctx.me,
            vec![("reason", Detail::Text("no-surviving-secondary"))],
        );
        self.store.clear();
        self.applied.clear();
        self.view = None;
        self.backup = None;
        self.voted_against = None;
        self.join = Default::default();
        self.join.excluded.insert(old);
        self.start_join(ctx);
    }

    // ---- Agent failure ----

    /// Removes a member and re-replicates what it held.
    pub(crate) fn agent_failed(
        &mut self,
        ctx: &mut Ctx,
        failed: NodeId,
        kind: MemberKind,
        how: &'static str,
    ) {
        let me = ctx.me;
        let r = self.ra();
        let Ok(repair) = r.cluster.handle_agent_failure(failed) else {
            return;
        };
        r.last_seen.remove(&failed);
        r.shrunk = true;
        let size = r.cluster.size() as u64;
        let secondary = r.cluster.secondary;
        ctx.member(
            kind,
            me,
            failed,
            vec![("members", Detail::Num(size)), ("detected", Detail::Text(how))],
        );
        if repair.secondary_changed {
            if let Some(s) = secondary {
                ctx.member(MemberKind::Secondary, me, s, Vec::new());
            }
        }
        self.execute_repair(ctx, repair);
        self.after_agent_loss(ctx, failed);
        self.lus_register(ctx);
        self.check_size(ctx);
    }

    // ---- bounces ----

    pub(crate) fn bounced(&mut self, ctx: &mut Ctx, dst: NodeId, msg: Message) {
        match msg {
            Message::Join { .. } => {
                if self.join.active && self.join.target == Some(dst) {
                    self.join.excluded.insert(dst);
                    self.join.target = None;
                    self.start_join(ctx);
                }
                return;
            }
            Message::RAgentDown { failed, .. } => {
                if self.view.as_ref().is_some_and(|v| v.ragent == failed) {
                    self.cluster_lost(ctx, failed);
                }
                return;
            }
            Message::StoreReplica { obj, ack_to: Some(a) } if a != ctx.me => {
                ctx.send(
                    a,
                    Message::CopyFailed {
                        id: obj.id,
                        target: dst,
                        target_down: true,
                    },
                );
                return;
            }
            Message::MergeInto { .. } => {
                self.restore_merge(ctx);
                if self.is_ragent() {
                    self.peer_gone(ctx, dst);
                    self.lus_deregister(ctx, dst);
                }
                return;
            }
            _ => {}
        }
        if !self.is_ragent() {
            if self.view.as_ref().is_some_and(|v| v.ragent == dst) {
                self.suspect(ctx, dst);
            }
            return;
        }
        let (member, peer) = {
            let r = self.ra();
            (r.cluster.members.contains(&dst), r.cluster.peers.contains(&dst))
        };
        if member {
            self.agent_failed(ctx, dst, MemberKind::Remove, "bounce");
        } else if peer || msg.is_inter_ragent() {
            self.peer_gone(ctx, dst);
            self.lus_deregister(ctx, dst);
        } else {
            self.after_agent_loss(ctx, dst);
        }
        match msg {
            Message::MigrateObject { obj } => self.migrate_bounced(ctx, obj),
            Message::BecomeRAgent { state } => {
                // The elected RAgent died before taking over: take its
                // members back and treat it as failed.
                let r = self.ra();
                let x = state.ragent;
                if let Ok(out) = r.cluster.absorb(*state) {
                    let now = ctx.now;
                    let members: Vec<NodeId> = r.cluster.members.iter().copied().collect();
                    for m in members {
                        r.last_seen.entry(m).or_insert(now);
                    }
                    r.peer_seen.remove(&x);
                    self.send_config(ctx, None);
                    self.execute_repair(ctx, out.repair);
                    self.agent_failed(ctx, x, MemberKind::Remove, "bounce");
                    self.ra().backup_holder = None;
                }
            }
            _ => {}
        }
    }

    // ---- RAgent peer graph ----

    pub(crate) fn on_lus_reply(&mut self, ctx: &mut Ctx, purpose: QueryPurpose, candidates: Vec<Candidate>) {
        match purpose {
            QueryPurpose::Join => self.on_join_candidates(ctx, candidates),
            QueryPurpose::Bootstrap => {
                if !self.is_ragent() {
                    return;
                }
                let me = ctx.me;
                let now = ctx.now;
                for c in candidates {
                    let r = self.ra();
                    if c.ragent != me && r.cluster.add_peer(c.ragent) {
                        r.peer_seen.insert(c.ragent, now);
                        ctx.send(c.ragent, Message::PeerHello { replaces: None });
                    }
                }
            }
            QueryPurpose::Merge => {
                if !self.is_ragent() || self.ra().reconfig != Reconfig::MergeQuerying {
                    return;
                }
                let me = ctx.me;
                let min = ctx.config.thresholds.min_cluster;
                let r = self.ra();
                if r.cluster.size() >= min {
                    r.reconfig = Reconfig::Idle;
                    return;
                }
                let live: Vec<(NodeId, usize)> = candidates
                    .iter()
                    .filter(|c| r.cluster.peers.contains(&c.ragent))
                    .map(|c| (c.ragent, c.connected))
                    .collect();
                match select_merge_target(&live, me) {
                    Some(t) => {
                        r.reconfig = Reconfig::MergeRequested(t);
                        let members = r.cluster.size();
                        ctx.send(t, Message::MergeRequest { members });
                    }
                    None => {
                        // Alone: the cluster may stay under the minimum.
                        r.reconfig = Reconfig::Idle;
                        r.shrunk = false;
                    }
                }
            }
        }
    }

    pub(crate) fn on_peer_hello(&mut self, ctx: &mut Ctx, src: NodeId, replaces: Option<NodeId>) {
        let me = ctx.me;
        if let Some(old) = replaces {
            if old != me {
                self.peer_gone(ctx, old);
            }
        }
        let now = ctx.now;
        let r = self.ra();
        let added = r.cluster.add_peer(src);
        r.peer_seen.insert(src, now);
        if added || replaces.is_some() {
            let peers: BTreeSet<NodeId> = r.cluster.peers.iter().copied().filter(|p| *p != src).collect();
            ctx.send(src, Message::PeerList { peers });
        }
    }

    pub(crate) fn on_peer_list(&mut self, ctx: &mut Ctx, peers: BTreeSet<NodeId>) {
        let me = ctx.me;
        let now = ctx.now;
        let r = self.ra();
        for p in peers {
            if p != me && r.cluster.add_peer(p) {
                r.peer_seen.insert(p, now);
                ctx.send(p, Message::PeerHello { replaces: None });
            }
        }
    }

    pub(crate) fn on_peer_heartbeat(&mut self, ctx: &mut Ctx, src: NodeId, catalogue: usize) {
        let now = ctx.now;
        let r = self.ra();
        if r.cluster.add_peer(src) {
            r.peer_seen.insert(src, now);
        }
        r.peer_sizes.insert(src, catalogue);
    }

    /// A peer RAgent left the graph: crashed, merged away or demoted.
    pub(crate) fn peer_gone(&mut self, ctx: &mut Ctx, peer: NodeId) {
        let r = self.ra();
        r.cluster.remove_peer(peer);
        r.peer_seen.remove(&peer);
        r.peer_sizes.remove(&peer);
        r.absorbing.remove(&peer);
        if matches!(r.reconfig, Reconfig::MergeRequested(t) | Reconfig::MergeAccepted(t) if t == peer) {
            r.reconfig = Reconfig::Idle;
        }
        self.peer_lost_work(ctx, peer);
    }

    // ---- reconfiguration ----

    pub(crate) fn try_reconfig(&mut self, ctx: &mut Ctx) {
        let t = ctx.config.thresholds;
        let r = self.ra();
        if r.busy() {
            return;
        }
        match r.reconfig {
            Reconfig::SplitWanted => {
                r.reconfig = Reconfig::Idle;
                if r.cluster.size() > t.max_cluster {
                    self.do_split(ctx);
                }
            }
            Reconfig::MergeWanted => {
                if r.cluster.size() < t.min_cluster && !r.cluster.peers.is_empty() {
                    r.reconfig = Reconfig::MergeQuerying;
                    ctx.send(
                        ctx.env.nearest_lus,
                        Message::LusQuery {
                            purpose: QueryPurpose::Merge,
                        },
                    );
                } else {
                    r.reconfig = Reconfig::Idle;
                }
            }
            Reconfig::MergeAccepted(target) => self.merge_out(ctx, target),
            _ => {}
        }
    }

    /// Replays held-back requests once no reconfiguration is pending.
    pub(crate) fn replay_deferred(&mut self, ctx: &mut Ctx) {
        let saved = ctx.request();
        while let Some(r) = self.ragent.as_mut() {
            if r.reconfig != Reconfig::Idle {
                break;
            }
            let Some((src, msg)) = r.deferred.pop_front() else {
                break;
            };
            ctx.set_request(msg.request());
            self.dispatch(ctx, src, msg);
            if self.is_ragent() {
                self.try_reconfig(ctx);
            }
        }
        ctx.set_request(saved);
    }

    /// Ships catalogue changes to the secondary: a full snapshot when the
    /// secondary changed, deltas otherwise.
    pub(crate) fn sync_backup(&mut self, ctx: &mut Ctx) {
        let r = self.ra();
        match r.cluster.secondary {
            Some(s) if r.backup_holder != Some(s) => {
                let state = Box::new(r.cluster.backup_copy());
                r.cluster.clear_dirty();
                r.backup_holder = Some(s);
                ctx.send(s, Message::BackupSnapshot { state });
            }
            Some(s) => {
                let deltas = r.cluster.take_deltas();
                if !deltas.is_empty() {
                    ctx.send(s, Message::BackupSync { deltas });
                }
            }
            None => {
                r.backup_holder = None;
                r.cluster.clear_dirty();
            }
        }
    }

    fn do_split(&mut self, ctx: &mut Ctx) {
        let me = ctx.me;
        let now = ctx.now;
        let thresholds = ctx.config.thresholds;
        let r = self.ra();
        let Ok(out) = r.cluster.split(&thresholds) else {
            return;
        };
        let x = out.new_cluster.ragent;
        let keep = r.cluster.size() as u64;
        let moved = out.new_cluster.size() as u64;
        let members = r.cluster.members.clone();
        r.last_seen.retain(|m, _| members.contains(m));
        r.peer_seen.insert(x, now);
        r.backup_holder = None;
        ctx.effect(Effect::Entries {
            kind: MemberKind::Split,
            cluster: me,
            before: out.entries_before,
            parts: (out.entries_keep, out.entries_moved),
        });
        ctx.member(
            MemberKind::Split,
            me,
            x,
            vec![("keep", Detail::Num(keep)), ("moved", Detail::Num(moved))],
        );
        self.send_config(ctx, None);
        self.execute_repair(ctx, out.keep_repair);
        ctx.send(
            x,
            Message::BecomeRAgent {
                state: Box::new(out.new_cluster),
            },
        );
        self.lus_register(ctx);
    }

    pub(crate) fn on_become_ragent(&mut self, ctx: &mut Ctx, _src: NodeId, mut state: ClusterState) {
        if self.is_ragent() || state.ragent != ctx.me {
            return;
        }
        let repair = state.rehome_outsiders();
        self.ragent = Some(Box::new(RAgentState::new(
            state,
            ctx.config.migration_threshold,
            ctx.now,
        )));
        self.view = None;
        self.backup = None;
        self.voted_against = None;
        self.send_config(ctx, None);
        self.execute_repair(ctx, repair);
        let own: Vec<_> = self.store.values().map(|r| r.obj.clone()).collect();
        for obj in own {
            for h in self.adopt_version(obj.id, obj.version) {
                ctx.send(
                    h,
                    Message::StoreReplica {
                        obj: obj.clone(),
                        ack_to: None,
                    },
                );
            }
        }
        self.store.clear();
        self.applied.clear();
        self.lus_register(ctx);
        let peers: Vec<NodeId> = self.ra().cluster.peers.iter().copied().collect();
        for p in peers {
            ctx.send(p, Message::PeerHello { replaces: None });
        }
        self.resend_outstanding(ctx);
    }

    pub(crate) fn on_merge_request(&mut self, ctx: &mut Ctx, src: NodeId, members: usize) {
        let me = ctx.me;
        let r = self.ra();
        let accept = match r.reconfig {
            // Both sides asked each other: the larger cluster absorbs.
            Reconfig::MergeRequested(t) if t == src => (r.cluster.size(), me) > (members, src),
            Reconfig::MergeRequested(_) | Reconfig::MergeAccepted(_) | Reconfig::MergeQuerying => false,
            _ => true,
        };
        if accept {
            if r.reconfig == Reconfig::MergeRequested(src) {
                r.reconfig = Reconfig::Idle;
            }
            r.absorbing.insert(src);
            ctx.send(src, Message::MergeAccept);
        } else {
            ctx.send(src, Message::MergeReject);
        }
    }

    pub(crate) fn on_merge_accept(&mut self, _ctx: &mut Ctx, src: NodeId) {
        let r = self.ra();
        if r.reconfig == Reconfig::MergeRequested(src) {
            r.reconfig = Reconfig::MergeAccepted(src);
        }
    }

    pub(crate) fn on_merge_reject(&mut self, ctx: &mut Ctx, src: NodeId) {
        let hb = ctx.config.heartbeat;
        let r = self.ra();
        if r.reconfig == Reconfig::MergeRequested(src) {
            r.reconfig = Reconfig::Idle;
            ctx.timer((2 * hb.period).max(ctx.config.bootstrap), Timer::MergeRetry);
        }
    }

    /// Hands the whole cluster to `target` and demotes this RAgent.
    fn merge_out(&mut self, ctx: &mut Ctx, target: NodeId) {
        let me = ctx.me;
        let r = *self.ragent.take().expect("merging RAgent");
        let state = r.cluster;
        ctx.send(
            target,
            Message::MergeInto {
                state: Box::new(state.clone()),
            },
        );
        ctx.member(
            MemberKind::Merge,
            me,
            target,
            vec![("members", Detail::Num(state.size() as u64))],
        );
        for p in state.peers.iter().filter(|p| **p != target) {
            ctx.send(*p, Message::PeerBye);
        }
        self.lus_deregister(ctx, me);
        self.merged_into = Some((target, Box::new(state)));
        self.view = Some(ClusterView {
            ragent: target,
            secondary: None,
            members: BTreeSet::new(),
        });
        self.last_heard = ctx.now;
        let saved = ctx.request();
        for (src, msg) in r.deferred {
            ctx.set_request(msg.request());
            self.dispatch(ctx, src, msg);
        }
        ctx.set_request(saved);
        self.resend_outstanding(ctx);
    }

    /// The merge target vanished before absorbing this cluster.
    fn restore_merge(&mut self, ctx: &mut Ctx) {
        let Some((target, state)) = self.merged_into.take() else {
            return;
        };
        let mut r = RAgentState::new(*state, ctx.config.migration_threshold, ctx.now);
        r.cluster.remove_peer(target);
        self.ragent = Some(Box::new(r));
        self.view = None;
        self.send_config(ctx, None);
        self.lus_register(ctx);
        let peers: Vec<NodeId> = self.ra().cluster.peers.iter().copied().collect();
        for p in peers {
            ctx.send(p, Message::PeerHello { replaces: None });
        }
    }

    pub(crate) fn on_merge_into(&mut self, ctx: &mut Ctx, src: NodeId, state: ClusterState) {
        let me = ctx.me;
        let now = ctx.now;
        let max = ctx.config.thresholds.max_cluster;
        let r = self.ra();
        r.absorbing.remove(&src);
        let Ok(out) = r.cluster.absorb(state) else {
            ctx.send(src, Message::MergeReject);
            return;
        };
        for n in &out.joined {
            r.last_seen.insert(*n, now);
        }
        r.peer_seen.remove(&src);
        r.peer_sizes.remove(&src);
        r.backup_holder = None;
        let size = r.cluster.size();
        if size > max && r.reconfig == Reconfig::Idle {
            r.reconfig = Reconfig::SplitWanted;
        }
        ctx.effect(Effect::Entries {
            kind: MemberKind::Merge,
            cluster: me,
            before: out.entries_after,
            parts: (out.entries_target, out.entries_absorbed),
        });
        ctx.member(
            MemberKind::Merge,
            me,
            src,
            vec![("members", Detail::Num(size as u64))],
        );
        self.send_config(ctx, None);
        self.execute_repair(ctx, out.repair);
        self.lus_register(ctx);
    }

    /// A demoted RAgent whose merge was refused takes its cluster back.
    pub(crate) fn on_merge_reject_demoted(&mut self, ctx: &mut Ctx, src: NodeId) {
        if self.merged_into.as_ref().is_some_and(|(t, _)| *t == src) {
            self.restore_merge(ctx);
        }
    }
}
