//! Data-plane handlers: client operations carried by Agents, and the RAgent
//! side of insert, search, update and migration.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{merge_results, select_replica_holders, should_delegate, Acquire, DataError, LockStage, SearchMode, UpdateJob};
use crate::catalogue::{CatalogueEntry, HolderList, ObjectMeta};
use crate::node::{Job, MigrateJob, Migration, Outstanding, PeerState, Relay, Replica, SearchJob};
use crate::protocol::{ClientOp, Ctx, Effect, Message, Reply, RequestId, Route};
use crate::sim::accounting::StepEvent;
use crate::types::{DistObject, NodeId, ObjectId, PatternKey};

fn reply_to(ctx: &mut Ctx, route: Route, req: RequestId, reply: Reply) {
    match route {
        Route::Agent(a) => ctx.send(a, Message::Response { req, reply }),
        Route::Peer(p) => ctx.send(p, Message::PeerReply { req, reply }),
    }
}

fn progress_to(ctx: &mut Ctx, route: Route, req: RequestId, version: u64) {
    match route {
        Route::Agent(a) => ctx.send(a, Message::Progress { req, version }),
        Route::Peer(p) => ctx.send(p, Message::PeerProgress { req, version }),
    }
}

impl PeerState {
    // ---- Agent: client operations ----

    pub(crate) fn on_client_request(&mut self, ctx: &mut Ctx, src: NodeId, req: RequestId, op: ClientOp) {
        if self.outstanding.contains_key(&req) {
            return;
        }
        self.outstanding.insert(
            req,
            Outstanding {
                client: src,
                op,
                sent_to: None,
            },
        );
        self.send_outstanding(ctx, req, false);
    }

    fn send_outstanding(&mut self, ctx: &mut Ctx, req: RequestId, retry: bool) {
        let me = ctx.me;
        let target = self.target_ragent(me);
        let Some(o) = self.outstanding.get_mut(&req) else {
            return;
        };
        o.sent_to = target;
        if let Some(t) = target {
            let op = o.op.clone();
            ctx.send(
                t,
                Message::AgentRequest {
                    req,
                    origin: me,
                    op,
                    retry,
                },
            );
        }
    }

    /// Sends every carried request not already at the current RAgent.
    pub(crate) fn resend_outstanding(&mut self, ctx: &mut Ctx) {
        let Some(target) = self.target_ragent(ctx.me) else {
            return;
        };
        let stale: Vec<RequestId> = self
            .outstanding
            .iter()
            .filter(|(_, o)| o.sent_to != Some(target))
            .map(|(r, _)| *r)
            .collect();
        for req in stale {
            self.send_outstanding(ctx, req, true);
        }
    }

    pub(crate) fn on_response(&mut self, ctx: &mut Ctx, req: RequestId, reply: Reply) {
        if let Some(o) = self.outstanding.remove(&req) {
            ctx.send(o.client, Message::Response { req, reply });
        }
    }

    pub(crate) fn on_progress(&mut self, ctx: &mut Ctx, req: RequestId, version: u64) {
        if let Some(o) = self.outstanding.get(&req) {
            ctx.send(o.client, Message::Progress { req, version });
        }
    }

    pub(crate) fn on_not_ragent(&mut self, ctx: &mut Ctx, src: NodeId, req: RequestId) {
        let target = self.target_ragent(ctx.me);
        let Some(o) = self.outstanding.get_mut(&req) else {
            return;
        };
        if o.sent_to != Some(src) {
            return;
        }
        if target.is_some_and(|t| t != src) {
            self.send_outstanding(ctx, req, true);
        } else {
            o.sent_to = None;
        }
    }

    // ---- Agent: replica store ----

    fn upsert_replica(&mut self, obj: DistObject) {
        match self.store.get_mut(&obj.id) {
            Some(r) => {
                r.advance(obj);
            }
            None => {
                self.store.insert(obj.id, Replica::new(obj));
            }
        }
    }

    pub(crate) fn on_read(&mut self, ctx: &mut Ctx, src: NodeId, req: RequestId, id: ObjectId) {
        let result = self
            .store
            .get(&id)
            .map(|r| r.obj.clone())
            .ok_or(DataError::NotHeld(id));
        ctx.send(src, Message::ReadResponse { req, result });
    }

    pub(crate) fn on_fetch(&mut self, ctx: &mut Ctx, src: NodeId, req: RequestId, job: u64, ids: Vec<ObjectId>) {
        let store_len = self.store.len() as u64;
        let mut objects = Vec::new();
        let mut missing = Vec::new();
        for id in ids {
            match self.store.get(&id) {
                Some(r) => {
                    ctx.step(req, src, StepEvent::Probe { store_len });
                    objects.push(r.obj.clone());
                }
                None => missing.push(id),
            }
        }
        ctx.send(
            src,
            Message::FetchReply {
                req,
                job,
                objects,
                missing,
            },
        );
    }

    pub(crate) fn on_store_replica(&mut self, ctx: &mut Ctx, obj: DistObject, ack_to: Option<NodeId>) {
        let (id, version) = (obj.id, obj.version);
        self.upsert_replica(obj);
        if let Some(a) = ack_to {
            ctx.send(a, Message::ReplicaStored { id, version });
        }
    }

    pub(crate) fn on_copy_replica(&mut self, ctx: &mut Ctx, id: ObjectId, target: NodeId, ack_to: NodeId) {
        match self.store.get(&id) {
            Some(r) => ctx.send(
                target,
                Message::StoreReplica {
                    obj: r.obj.clone(),
                    ack_to: Some(ack_to),
                },
            ),
            None => ctx.send(
                ack_to,
                Message::CopyFailed {
                    id,
                    target,
                    target_down: false,
                },
            ),
        }
    }

    /// Owner side of an update. A retried request that was already applied
    /// is answered again without bumping the version.
    pub(crate) fn on_apply_update(
        &mut self,
        ctx: &mut Ctx,
        src: NodeId,
        req: RequestId,
        id: ObjectId,
        payload: Vec<u8>,
    ) {
        let Some(r) = self.store.get_mut(&id) else {
            ctx.send(src, Message::ApplyFailed { req, id });
            return;
        };
        if self.applied.get(&id) == Some(&(req, r.obj.version)) {
            ctx.send(src, Message::Applied { req, obj: r.obj.clone() });
            return;
        }
        let mut next = r.obj.clone();
        next.payload = payload;
        next.version += 1;
        r.advance(next.clone());
        self.applied.insert(id, (req, next.version));
        ctx.send(src, Message::Applied { req, obj: next });
    }

    pub(crate) fn on_replica_update(&mut self, ctx: &mut Ctx, src: NodeId, obj: DistObject) {
        let (id, version) = (obj.id, obj.version);
        self.upsert_replica(obj);
        ctx.send(src, Message::ReplicaUpdated { id, version });
    }

    // ---- RAgent: entry point ----

    pub(crate) fn on_agent_request(
        &mut self,
        ctx: &mut Ctx,
        src: NodeId,
        req: RequestId,
        origin: NodeId,
        op: ClientOp,
        retry: bool,
    ) {
        let me = ctx.me;
        let r = self.ra();
        if r.reconfig != crate::node::Reconfig::Idle {
            r.deferred.push_back((
                src,
                Message::AgentRequest {
                    req,
                    origin,
                    op,
                    retry,
                },
            ));
            return;
        }
        if origin != me && !r.cluster.members.contains(&origin) {
            ctx.send(src, Message::NotRAgent { req });
            return;
        }
        let route = Route::Agent(src);
        match op {
            ClientOp::Insert(obj) => self.do_insert(ctx, req, route, obj, retry, false),
            ClientOp::Search { criterion, mode } => self.start_search(ctx, req, route, criterion, mode, true),
            ClientOp::Update { id, payload } => self.start_update(ctx, req, route, id, payload, true),
            ClientOp::Read { id } => reply_to(ctx, route, req, Reply::Failed(DataError::NotHeld(id))),
        }
    }

    // ---- RAgent: insert ----

    pub(crate) fn do_insert(
        &mut self,
        ctx: &mut Ctx,
        req: RequestId,
        route: Route,
        obj: DistObject,
        retry: bool,
        from_peer: bool,
    ) {
        let id = obj.id;
        let cfg = ctx.config;
        let r = self.ra();
        if r.relays.contains_key(&req) {
            return;
        }
        if r.cluster.catalogue.contains(id) {
            let reply = if retry {
                Reply::Inserted { id }
            } else {
                Reply::Failed(DataError::DuplicateObject(id))
            };
            reply_to(ctx, route, req, reply);
            return;
        }
        if !from_peer {
            let sizes: Vec<usize> = r
                .peer_sizes
                .iter()
                .filter(|(p, _)| r.cluster.peers.contains(p))
                .map(|(_, s)| *s)
                .collect();
            let local = r.cluster.catalogue.len();
            if should_delegate(local, &sizes, cfg.delegation_factor, cfg.delegation_floor)
                && self.delegate(ctx, req, route, obj.clone())
            {
                return;
            }
        }
        match self.place(ctx, obj.clone()) {
            Ok(()) => reply_to(ctx, route, req, Reply::Inserted { id }),
            Err(DataError::InsufficientAgents) if !from_peer && self.delegate(ctx, req, route, obj) => {}
            Err(e) => reply_to(ctx, route, req, Reply::Failed(e)),
        }
    }

    /// Hands an insert to the known peer with the smallest catalogue.
    fn delegate(&mut self, ctx: &mut Ctx, req: RequestId, route: Route, obj: DistObject) -> bool {
        let r = self.ra();
        let target = r
            .cluster
            .peers
            .iter()
            .map(|p| (r.peer_sizes.get(p).copied().unwrap_or(0), *p))
            .min();
        let Some((_, target)) = target else {
            return false;
        };
        *r.peer_sizes.entry(target).or_insert(0) += 1;
        r.relays.insert(
            req,
            Relay::Insert {
                route: Some(route),
                obj: obj.clone(),
                target,
            },
        );
        ctx.send(target, Message::PeerInsert { req, obj });
        true
    }

    /// Catalogues `obj` on the two least-loaded members and ships it there.
    fn place(&mut self, ctx: &mut Ctx, obj: DistObject) -> Result<(), DataError> {
        let r = self.ra();
        let (a, b) = select_replica_holders(&r.cluster.loads)?;
        let entry = CatalogueEntry {
            meta: ObjectMeta::of(&obj),
            holders: HolderList::new(vec![a, b]).expect("distinct holders"),
            version: obj.version,
        };
        r.cluster
            .catalogue
            .insert_entry(entry)
            .map_err(|_| DataError::DuplicateObject(obj.id))?;
        r.cluster.loads.increment(a);
        r.cluster.loads.increment(b);
        r.cluster.touch(obj.id);
        for h in [a, b] {
            ctx.send(
                h,
                Message::StoreReplica {
                    obj: obj.clone(),
                    ack_to: None,
                },
            );
        }
        Ok(())
    }

    /// Places an object locally after its peer could not take it.
    fn place_back(&mut self, ctx: &mut Ctx, req: RequestId, route: Option<Route>, obj: DistObject) {
        let id = obj.id;
        let result = if self.ra().cluster.catalogue.contains(id) {
            Ok(())
        } else {
            self.place(ctx, obj)
        };
        match (route, result) {
            (Some(route), Ok(())) => reply_to(ctx, route, req, Reply::Inserted { id }),
            (Some(route), Err(e)) => reply_to(ctx, route, req, Reply::Failed(e)),
            (None, Ok(())) => {}
            (None, Err(_)) => {
                let me = ctx.me;
                ctx.effect(Effect::Lost { id, cluster: me });
            }
        }
    }

    // ---- RAgent: search ----

    pub(crate) fn start_search(
        &mut self,
        ctx: &mut Ctx,
        req: RequestId,
        route: Route,
        criterion: PatternKey,
        mode: SearchMode,
        fan_out: bool,
    ) {
        let me = ctx.me;
        let r = self.ra();
        let lookup = r.cluster.catalogue.lookup(&criterion);
        let p = lookup.matches.len() as u64;
        ctx.step(
            req,
            me,
            StepEvent::Lookup {
                key_count: lookup.key_count as u64,
                key_steps: lookup.key_steps,
                matches: match mode {
                    SearchMode::All => p,
                    SearchMode::First => p.min(1),
                },
            },
        );
        let mut job = SearchJob {
            req,
            route,
            criterion: criterion.clone(),
            mode,
            candidates: VecDeque::new(),
            found: BTreeMap::new(),
            pending: BTreeMap::new(),
            tried: BTreeMap::new(),
            peers: BTreeSet::new(),
            fan_out,
            fanned: false,
        };
        match mode {
            SearchMode::All => {
                for (id, owner) in &lookup.matches {
                    job.pending.entry(*owner).or_default().insert(*id);
                    job.tried.entry(*id).or_default().insert(*owner);
                }
                if fan_out {
                    job.peers = r.cluster.peers.clone();
                    job.fanned = true;
                }
            }
            SearchMode::First => {
                job.candidates = lookup.matches.iter().map(|(id, _)| *id).collect();
            }
        }
        let pending = job.pending.clone();
        let peers = job.peers.clone();
        let jid = r.add_job(Job::Search(job));
        for (holder, ids) in pending {
            ctx.step(req, me, StepEvent::FetchRequest { holder });
            ctx.send(
                holder,
                Message::Fetch {
                    req,
                    job: jid,
                    ids: ids.into_iter().collect(),
                },
            );
        }
        for p in peers {
            ctx.send(
                p,
                Message::PeerSearch {
                    req,
                    criterion: criterion.clone(),
                    mode,
                },
            );
        }
        if mode == SearchMode::First {
            self.first_advance(ctx, jid);
        }
        self.search_check(ctx, jid);
    }

    /// Next untried confirmed holder of `id` in holder order.
    fn next_holder(&mut self, id: ObjectId, tried: &BTreeSet<NodeId>) -> Option<NodeId> {
        let c = &self.ra().cluster;
        let holders = c.catalogue.holders_of(id).ok()?;
        holders
            .iter()
            .find(|h| !tried.contains(h) && !c.in_transit.contains_key(&(id, *h)))
    }

    fn search_fetch(&mut self, ctx: &mut Ctx, jid: u64, id: ObjectId) -> bool {
        let me = ctx.me;
        let tried = match self.ra().jobs.get(&jid) {
            Some(Job::Search(j)) => j.tried.get(&id).cloned().unwrap_or_default(),
            _ => return false,
        };
        let Some(holder) = self.next_holder(id, &tried) else {
            return false;
        };
        let Some(Job::Search(job)) = self.ra().jobs.get_mut(&jid) else {
            return false;
        };
        job.tried.entry(id).or_default().insert(holder);
        job.pending.entry(holder).or_default().insert(id);
        let req = job.req;
        ctx.step(req, me, StepEvent::FetchRequest { holder });
        ctx.send(
            holder,
            Message::Fetch {
                req,
                job: jid,
                ids: vec![id],
            },
        );
        true
    }

    /// First mode: fetch the next candidate, or fan out once nothing local
    /// is left.
    fn first_advance(&mut self, ctx: &mut Ctx, jid: u64) {
        loop {
            let Some(Job::Search(job)) = self.ra().jobs.get_mut(&jid) else {
                return;
            };
            if !job.found.is_empty() || !job.pending.is_empty() {
                return;
            }
            match job.candidates.pop_front() {
                Some(id) => {
                    if self.search_fetch(ctx, jid, id) {
                        return;
                    }
                }
                None => break,
            }
        }
        let r = self.ra();
        let peers = r.cluster.peers.clone();
        let Some(Job::Search(job)) = r.jobs.get_mut(&jid) else {
            return;
        };
        if job.fan_out && !job.fanned && job.peers.is_empty() {
            job.fanned = true;
            job.peers = peers.clone();
            let (req, criterion, mode) = (job.req, job.criterion.clone(), job.mode);
            for p in peers {
                ctx.send(
                    p,
                    Message::PeerSearch {
                        req,
                        criterion: criterion.clone(),
                        mode,
                    },
                );
            }
        }
    }

    /// Replies and drops the job once it has everything it waits for.
    fn search_check(&mut self, ctx: &mut Ctx, jid: u64) {
        let r = self.ra();
        let Some(Job::Search(job)) = r.jobs.get(&jid) else {
            return;
        };
        let done = match job.mode {
            SearchMode::All => job.pending.is_empty() && job.peers.is_empty(),
            SearchMode::First => {
                !job.found.is_empty()
                    || (job.pending.is_empty()
                        && job.candidates.is_empty()
                        && job.peers.is_empty()
                        && (job.fanned || !job.fan_out || r.cluster.peers.is_empty()))
            }
        };
        if !done {
            return;
        }
        let Some(Job::Search(job)) = r.jobs.remove(&jid) else {
            return;
        };
        match (job.mode, job.route) {
            (SearchMode::All, Route::Agent(a)) => {
                let objs = merge_results([job.found.into_values().map(|(o, _)| o)]);
                ctx.send(
                    a,
                    Message::Response {
                        req: job.req,
                        reply: Reply::Found(objs),
                    },
                );
            }
            (SearchMode::First, Route::Agent(a)) => {
                let first = job.found.into_values().next();
                ctx.send(
                    a,
                    Message::Response {
                        req: job.req,
                        reply: Reply::First(first),
                    },
                );
            }
            (mode, Route::Peer(p)) => {
                let mut results: Vec<(DistObject, NodeId)> = job.found.into_values().collect();
                if mode == SearchMode::First {
                    results.truncate(1);
                }
                ctx.send(
                    p,
                    Message::PeerSearchReply {
                        req: job.req,
                        results,
                    },
                );
            }
        }
    }

    pub(crate) fn on_fetch_reply(
        &mut self,
        ctx: &mut Ctx,
        src: NodeId,
        jid: u64,
        objects: Vec<DistObject>,
        missing: Vec<ObjectId>,
    ) {
        let me = ctx.me;
        match self.ra().jobs.get_mut(&jid) {
            Some(Job::Search(job)) => {
                ctx.step(
                    job.req,
                    me,
                    StepEvent::FetchReceived {
                        objects: objects.len() as u64,
                    },
                );
                if let Some(ids) = job.pending.get_mut(&src) {
                    for o in &objects {
                        ids.remove(&o.id);
                    }
                    for id in &missing {
                        ids.remove(id);
                    }
                    if ids.is_empty() {
                        job.pending.remove(&src);
                    }
                }
                for o in objects {
                    job.found.entry(o.id).or_insert((o, src));
                }
                let mode = job.mode;
                match mode {
                    SearchMode::All => {
                        for id in missing {
                            self.search_fetch(ctx, jid, id);
                        }
                    }
                    SearchMode::First => {
                        if let Some(Job::Search(job)) = self.ra().jobs.get_mut(&jid) {
                            for id in missing.into_iter().rev() {
                                job.candidates.push_front(id);
                            }
                        }
                        self.first_advance(ctx, jid);
                    }
                }
                self.search_check(ctx, jid);
            }
            Some(Job::Migrate(job)) => {
                if job.pending != Some(src) {
                    return;
                }
                job.pending = None;
                match objects.into_iter().find(|o| o.id == job.id) {
                    Some(obj) => self.migrate_out(ctx, jid, obj),
                    None => self.migrate_fetch_next(ctx, jid),
                }
            }
            None => {}
        }
    }

    pub(crate) fn on_peer_search_reply(
        &mut self,
        ctx: &mut Ctx,
        src: NodeId,
        req: RequestId,
        results: Vec<(DistObject, NodeId)>,
    ) {
        let r = self.ra();
        let jid = r.jobs.iter().find_map(|(jid, j)| match j {
            Job::Search(s) if s.req == req && s.peers.contains(&src) => Some(*jid),
            _ => None,
        });
        let Some(jid) = jid else {
            return;
        };
        let Some(Job::Search(job)) = r.jobs.get_mut(&jid) else {
            return;
        };
        job.peers.remove(&src);
        let mut hit = None;
        match job.mode {
            SearchMode::All => {
                for (o, h) in results {
                    job.found.entry(o.id).or_insert((o, h));
                }
            }
            SearchMode::First => {
                if job.found.is_empty() {
                    if let Some((o, h)) = results.into_iter().next() {
                        hit = Some(o.id);
                        job.found.insert(o.id, (o, h));
                    }
                }
            }
        }
        if let Some(id) = hit {
            self.count_remote_hit(ctx, src, id);
        }
        self.search_check(ctx, jid);
    }

    /// First-match hits served by a peer; past the threshold the object is
    /// asked over.
    fn count_remote_hit(&mut self, ctx: &mut Ctx, source: NodeId, id: ObjectId) {
        let r = self.ra();
        if !r.hot.record(id) {
            return;
        }
        if r.cluster.size() < 2 || r.migrations.contains_key(&id) || r.cluster.catalogue.contains(id) {
            return;
        }
        r.migrations.insert(
            id,
            Migration {
                source,
                retried: false,
            },
        );
        ctx.send(source, Message::MigrateRequest { id });
    }

    // ---- RAgent: update ----

    pub(crate) fn start_update(
        &mut self,
        ctx: &mut Ctx,
        req: RequestId,
        route: Route,
        id: ObjectId,
        payload: Vec<u8>,
        fan_out: bool,
    ) {
        let r = self.ra();
        if r.cluster.catalogue.contains(id) {
            if let Route::Peer(p) = route {
                ctx.send(p, Message::PeerUpdateClaim { req, claimed: true });
            }
            // A resend after the origin's failover replaces the route so
            // progress and the reply reach the new RAgent.
            if let Some(lock) = r.locks.get_mut(id) {
                let known = lock.current.iter_mut().chain(lock.queue.iter_mut()).find(|j| j.req == req);
                if let Some(job) = known {
                    job.route = route;
                    return;
                }
            }
            let owner = r.cluster.catalogue.owner(id).expect("listed");
            let job = UpdateJob { req, route, payload };
            if r.locks.acquire(id, job, owner) == Acquire::Granted {
                self.begin_update(ctx, id, true);
            }
            return;
        }
        if r.relays.contains_key(&req) {
            return;
        }
        match route {
            Route::Peer(p) => ctx.send(p, Message::PeerUpdateClaim { req, claimed: false }),
            Route::Agent(_) if fan_out && !r.cluster.peers.is_empty() => {
                let peers = r.cluster.peers.clone();
                r.relays.insert(
                    req,
                    Relay::Update {
                        route,
                        id,
                        awaiting: peers.clone(),
                        claimed: None,
                    },
                );
                for p in peers {
                    ctx.send(
                        p,
                        Message::PeerUpdate {
                            req,
                            id,
                            payload: payload.clone(),
                        },
                    );
                }
            }
            Route::Agent(_) => reply_to(ctx, route, req, Reply::Failed(DataError::UnknownObject(id))),
        }
    }

    /// Sends the running job of `id`'s lock to the current owner.
    fn begin_update(&mut self, ctx: &mut Ctx, id: ObjectId, notify: bool) {
        let r = self.ra();
        let (Some(owner), Some(version)) = (
            r.cluster.catalogue.owner(id),
            r.cluster.catalogue.entry(id).map(|e| e.version),
        ) else {
            return;
        };
        let Some(lock) = r.locks.get_mut(id) else {
            return;
        };
        let Some(job) = lock.current.clone() else {
            return;
        };
        lock.stage = LockStage::AwaitApply { owner };
        if notify {
            progress_to(ctx, job.route, job.req, version + 1);
        }
        ctx.send(
            owner,
            Message::ApplyUpdate {
                req: job.req,
                id,
                payload: job.payload,
            },
        );
    }

    pub(crate) fn on_applied(&mut self, ctx: &mut Ctx, src: NodeId, req: RequestId, obj: DistObject) {
        let id = obj.id;
        let r = self.ra();
        let Some(lock) = r.locks.get_mut(id) else {
            return;
        };
        let current = lock.current.as_ref().map(|j| j.req);
        if current != Some(req) || lock.stage != (LockStage::AwaitApply { owner: src }) {
            return;
        }
        let others: Vec<NodeId> = r
            .cluster
            .catalogue
            .holders_of(id)
            .map(|h| h.iter().filter(|n| *n != src).collect())
            .unwrap_or_default();
        for h in &others {
            ctx.send(*h, Message::ReplicaUpdate { obj: obj.clone() });
        }
        let empty = others.is_empty();
        lock.stage = LockStage::AwaitReplicas {
            version: obj.version,
            object: obj,
            waiting: others,
        };
        if empty {
            self.commit(ctx, id);
        }
    }

    pub(crate) fn on_replica_updated(&mut self, ctx: &mut Ctx, src: NodeId, id: ObjectId, version: u64) {
        let Some(lock) = self.ra().locks.get_mut(id) else {
            return;
        };
        if let LockStage::AwaitReplicas {
            version: v,
            waiting,
            ..
        } = &mut lock.stage
        {
            if *v == version {
                waiting.retain(|n| *n != src);
                if waiting.is_empty() {
                    self.commit(ctx, id);
                }
            }
        }
    }

    fn commit(&mut self, ctx: &mut Ctx, id: ObjectId) {
        let r = self.ra();
        let Some(lock) = r.locks.get(id) else {
            return;
        };
        let LockStage::AwaitReplicas { version, .. } = lock.stage else {
            return;
        };
        let job = lock.current.clone().expect("running job");
        let _ = r.cluster.catalogue.set_version(id, version);
        r.cluster.touch(id);
        reply_to(ctx, job.route, job.req, Reply::Committed { id, version });
        let owner = r.cluster.catalogue.owner(id).unwrap_or(ctx.me);
        if r.locks.release(id, owner).is_some() {
            self.begin_update(ctx, id, true);
        }
    }

    pub(crate) fn on_apply_failed(&mut self, ctx: &mut Ctx, src: NodeId, req: RequestId, id: ObjectId) {
        let r = self.ra();
        let Some(lock) = r.locks.get(id) else {
            return;
        };
        let current = lock.current.as_ref().map(|j| j.req);
        if current != Some(req) || lock.stage != (LockStage::AwaitApply { owner: src }) {
            return;
        }
        let repair = r.cluster.drop_holders(id, &[src]);
        self.execute_repair(ctx, repair);
        if self.ra().cluster.catalogue.contains(id) {
            self.begin_update(ctx, id, false);
        }
    }

    /// A repair copy started while an update is waiting on replicas: the
    /// new holder must get the new version too.
    pub(crate) fn copy_started(&mut self, ctx: &mut Ctx, id: ObjectId, target: NodeId) {
        let Some(r) = self.ragent.as_mut() else {
            return;
        };
        let Some(lock) = r.locks.get_mut(id) else {
            return;
        };
        if let LockStage::AwaitReplicas { object, waiting, .. } = &mut lock.stage {
            if !waiting.contains(&target) {
                waiting.push(target);
                ctx.send(target, Message::ReplicaUpdate { obj: object.clone() });
            }
        }
    }

    pub(crate) fn on_update_claim(&mut self, ctx: &mut Ctx, src: NodeId, req: RequestId, claimed: bool) {
        let r = self.ra();
        let Some(Relay::Update {
            route,
            id,
            awaiting,
            claimed: owner,
        }) = r.relays.get_mut(&req)
        else {
            return;
        };
        awaiting.remove(&src);
        if claimed && owner.is_none() {
            *owner = Some(src);
        }
        if awaiting.is_empty() && owner.is_none() {
            let (route, id) = (*route, *id);
            r.relays.remove(&req);
            reply_to(ctx, route, req, Reply::Failed(DataError::UnknownObject(id)));
        }
    }

    pub(crate) fn on_peer_progress(&mut self, ctx: &mut Ctx, req: RequestId, version: u64) {
        if let Some(Relay::Update { route, .. }) = self.ra().relays.get(&req) {
            let route = *route;
            progress_to(ctx, route, req, version);
        }
    }

    pub(crate) fn on_peer_reply(&mut self, ctx: &mut Ctx, req: RequestId, reply: Reply) {
        let Some(relay) = self.ra().relays.remove(&req) else {
            return;
        };
        match relay {
            Relay::Insert { route, obj, .. } => match reply {
                Reply::Failed(DataError::Unreachable(_)) | Reply::Failed(DataError::InsufficientAgents) => {
                    self.place_back(ctx, req, route, obj)
                }
                reply => {
                    if let Some(route) = route {
                        reply_to(ctx, route, req, reply);
                    }
                }
            },
            Relay::Update { route, .. } => reply_to(ctx, route, req, reply),
        }
    }

    // ---- RAgent: migration ----

    pub(crate) fn on_migrate_request(&mut self, ctx: &mut Ctx, src: NodeId, id: ObjectId) {
        let me = ctx.me;
        let r = self.ra();
        if !r.cluster.catalogue.contains(id) || r.locks.lock_for_migration(id).is_err() {
            ctx.send(src, Message::MigrateReject { id });
            return;
        }
        let req = r.internal_request(me);
        let jid = r.add_job(Job::Migrate(MigrateJob {
            id,
            requester: src,
            req,
            pending: None,
            tried: BTreeSet::new(),
        }));
        self.migrate_fetch_next(ctx, jid);
    }

    fn migrate_fetch_next(&mut self, ctx: &mut Ctx, jid: u64) {
        let (id, tried) = match self.ra().jobs.get(&jid) {
            Some(Job::Migrate(j)) => (j.id, j.tried.clone()),
            _ => return,
        };
        let Some(holder) = self.next_holder(id, &tried) else {
            self.abort_migration(ctx, jid, true);
            return;
        };
        let Some(Job::Migrate(job)) = self.ra().jobs.get_mut(&jid) else {
            return;
        };
        job.tried.insert(holder);
        job.pending = Some(holder);
        let req = job.req;
        ctx.send(
            holder,
            Message::Fetch {
                req,
                job: jid,
                ids: vec![id],
            },
        );
    }

    /// Gives up on an outgoing migration and restarts held-back updates.
    fn abort_migration(&mut self, ctx: &mut Ctx, jid: u64, notify: bool) {
        let r = self.ra();
        let Some(Job::Migrate(job)) = r.jobs.remove(&jid) else {
            return;
        };
        if notify {
            ctx.send(job.requester, Message::MigrateReject { id: job.id });
        }
        self.restart_updates(ctx, job.id);
    }

    fn restart_updates(&mut self, ctx: &mut Ctx, id: ObjectId) {
        let r = self.ra();
        let jobs = r.locks.remove(id);
        let Some(owner) = r.cluster.catalogue.owner(id) else {
            for j in jobs {
                reply_to(ctx, j.route, j.req, Reply::Failed(DataError::UnknownObject(id)));
            }
            return;
        };
        let mut granted = false;
        for j in jobs {
            granted |= r.locks.acquire(id, j, owner) == Acquire::Granted;
        }
        if granted {
            self.begin_update(ctx, id, true);
        }
    }

    /// Source side: the replica is in hand, hand the object over.
    fn migrate_out(&mut self, ctx: &mut Ctx, jid: u64, obj: DistObject) {
        let r = self.ra();
        let Some(Job::Migrate(job)) = r.jobs.remove(&jid) else {
            return;
        };
        let id = job.id;
        let Some(entry) = r.cluster.catalogue.remove(id) else {
            ctx.send(job.requester, Message::MigrateReject { id });
            return;
        };
        for h in entry.holders.iter() {
            r.cluster.loads.decrement(h);
            ctx.send(h, Message::DropReplica { id });
        }
        r.cluster.in_transit.retain(|(i, _), _| *i != id);
        r.cluster.touch(id);
        r.hot.reset(id);
        let mut obj = obj;
        obj.version = obj.version.max(entry.version);
        ctx.send(job.requester, Message::MigrateObject { obj });
        // Updates that queued behind the migration follow the object.
        for j in r.locks.remove(id) {
            r.relays.insert(
                j.req,
                Relay::Update {
                    route: j.route,
                    id,
                    awaiting: BTreeSet::new(),
                    claimed: Some(job.requester),
                },
            );
            ctx.send(
                job.requester,
                Message::PeerUpdate {
                    req: j.req,
                    id,
                    payload: j.payload,
                },
            );
        }
    }

    pub(crate) fn on_migrate_object(&mut self, ctx: &mut Ctx, src: NodeId, obj: DistObject) {
        let me = ctx.me;
        let id = obj.id;
        let r = self.ra();
        r.migrations.remove(&id);
        r.hot.reset(id);
        if r.cluster.catalogue.contains(id) {
            return;
        }
        if self.place(ctx, obj.clone()).is_err() {
            let r = self.ra();
            let req = r.internal_request(me);
            r.relays.insert(
                req,
                Relay::Insert {
                    route: None,
                    obj: obj.clone(),
                    target: src,
                },
            );
            ctx.send(src, Message::PeerInsert { req, obj });
        }
    }

    pub(crate) fn on_migrate_reject(&mut self, ctx: &mut Ctx, src: NodeId, id: ObjectId) {
        let r = self.ra();
        let Some(m) = r.migrations.get_mut(&id) else {
            return;
        };
        if m.source != src {
            return;
        }
        if m.retried {
            r.migrations.remove(&id);
            r.hot.reset(id);
        } else {
            m.retried = true;
            ctx.send(src, Message::MigrateRequest { id });
        }
    }

    /// The requester vanished while the object was on its way.
    pub(crate) fn migrate_bounced(&mut self, ctx: &mut Ctx, obj: DistObject) {
        let req = self.ra().internal_request(ctx.me);
        self.place_back(ctx, req, None, obj);
    }

    // ---- RAgent: cleanup ----

    /// Re-drives work that was waiting on `failed`.
    pub(crate) fn after_agent_loss(&mut self, ctx: &mut Ctx, failed: NodeId) {
        let Some(r) = self.ragent.as_mut() else {
            return;
        };
        let mut searches = Vec::new();
        let mut migrates = Vec::new();
        for (jid, job) in r.jobs.iter_mut() {
            match job {
                Job::Search(s) => {
                    if let Some(ids) = s.pending.remove(&failed) {
                        searches.push((*jid, ids));
                    }
                }
                Job::Migrate(m) => {
                    if m.pending == Some(failed) {
                        m.pending = None;
                        migrates.push(*jid);
                    }
                }
            }
        }
        let mut reapply = Vec::new();
        let mut commit = Vec::new();
        for id in r.locks.ids() {
            let lock = r.locks.get_mut(id).expect("listed");
            match &mut lock.stage {
                LockStage::AwaitApply { owner } if *owner == failed => reapply.push(id),
                LockStage::AwaitReplicas { waiting, .. } if waiting.contains(&failed) => {
                    waiting.retain(|n| *n != failed);
                    if waiting.is_empty() {
                        commit.push(id);
                    }
                }
                _ => {}
            }
        }
        for (jid, ids) in searches {
            let mode = match self.ra().jobs.get(&jid) {
                Some(Job::Search(s)) => s.mode,
                _ => continue,
            };
            match mode {
                SearchMode::All => {
                    for id in ids {
                        self.search_fetch(ctx, jid, id);
                    }
                }
                SearchMode::First => {
                    if let Some(Job::Search(s)) = self.ra().jobs.get_mut(&jid) {
                        for id in ids.into_iter().rev() {
                            s.candidates.push_front(id);
                        }
                    }
                    self.first_advance(ctx, jid);
                }
            }
            self.search_check(ctx, jid);
        }
        for jid in migrates {
            self.migrate_fetch_next(ctx, jid);
        }
        for id in reapply {
            self.begin_update(ctx, id, false);
        }
        for id in commit {
            self.commit(ctx, id);
        }
    }

    /// Settles work that depended on a peer RAgent that left.
    pub(crate) fn peer_lost_work(&mut self, ctx: &mut Ctx, peer: NodeId) {
        let r = self.ra();
        let mut searches = Vec::new();
        let mut migrates = Vec::new();
        for (jid, job) in r.jobs.iter_mut() {
            match job {
                Job::Search(s) => {
                    if s.peers.remove(&peer) {
                        searches.push(*jid);
                    }
                }
                Job::Migrate(m) => {
                    if m.requester == peer {
                        migrates.push(*jid);
                    }
                }
            }
        }
        let mut inserts = Vec::new();
        let mut replies = Vec::new();
        r.relays.retain(|req, relay| match relay {
            Relay::Insert { route, obj, target } if *target == peer => {
                inserts.push((*req, *route, obj.clone()));
                false
            }
            Relay::Insert { .. } => true,
            Relay::Update {
                route,
                id,
                awaiting,
                claimed,
            } => {
                awaiting.remove(&peer);
                if *claimed == Some(peer) {
                    replies.push((*req, *route, DataError::Unreachable(peer)));
                    false
                } else if awaiting.is_empty() && claimed.is_none() {
                    replies.push((*req, *route, DataError::UnknownObject(*id)));
                    false
                } else {
                    true
                }
            }
        });
        let stale: Vec<ObjectId> = r
            .migrations
            .iter()
            .filter(|(_, m)| m.source == peer)
            .map(|(id, _)| *id)
            .collect();
        for id in stale {
            r.migrations.remove(&id);
            r.hot.reset(id);
        }
        for jid in searches {
            self.first_advance(ctx, jid);
            self.search_check(ctx, jid);
        }
        for (req, route, obj) in inserts {
            self.place_back(ctx, req, route, obj);
        }
        for (req, route, e) in replies {
            reply_to(ctx, route, req, Reply::Failed(e));
        }
        for jid in migrates {
            self.abort_migration(ctx, jid, false);
        }
    }

    /// An object vanished from the catalogue: fail whatever waits on it.
    pub(crate) fn object_lost(&mut self, ctx: &mut Ctx, id: ObjectId) {
        let Some(r) = self.ragent.as_mut() else {
            return;
        };
        for j in r.locks.remove(id) {
            reply_to(ctx, j.route, j.req, Reply::Failed(DataError::UnknownObject(id)));
        }
        r.migrations.remove(&id);
        let jobs: Vec<(u64, NodeId)> = r
            .jobs
            .iter()
            .filter_map(|(jid, j)| match j {
                Job::Migrate(m) if m.id == id => Some((*jid, m.requester)),
                _ => None,
            })
            .collect();
        for (jid, requester) in jobs {
            r.jobs.remove(&jid);
            ctx.send(requester, Message::MigrateReject { id });
        }
    }

    // ---- RAgent: version reconciliation after failover ----

    /// Raises `id`'s catalogued version to `version` when a replica is
    /// known to carry it, returning the holders to bring up to date. An
    /// object under a running update is left to that update's commit.
    pub(crate) fn adopt_version(&mut self, id: ObjectId, version: u64) -> Vec<NodeId> {
        let r = self.ra();
        if r.locks.get(id).is_some() {
            return Vec::new();
        }
        let Some(e) = r.cluster.catalogue.entry(id) else {
            return Vec::new();
        };
        if e.version >= version {
            return Vec::new();
        }
        let holders = e.holders.as_slice().to_vec();
        let _ = r.cluster.catalogue.set_version(id, version);
        r.cluster.touch(id);
        holders
    }

    pub(crate) fn on_replica_versions(&mut self, ctx: &mut Ctx, src: NodeId, versions: Vec<(ObjectId, u64)>) {
        let me = ctx.me;
        for (id, version) in versions {
            let held = self.ra().cluster.catalogue.holders_of(id).is_ok_and(|h| h.contains(src));
            if !held {
                continue;
            }
            for h in self.adopt_version(id, version) {
                if h != src {
                    ctx.send(src, Message::CopyReplica { id, target: h, ack_to: me });
                }
            }
        }
    }

    // ---- RAgent: repair acknowledgements ----

    pub(crate) fn on_replica_stored(&mut self, ctx: &mut Ctx, src: NodeId, id: ObjectId) {
        let c = &mut self.ra().cluster;
        if c.copy_confirmed(id, src) {
            return;
        }
        // Copies landing after the object migrated away or lost the slot
        // are surplus. Reconfigurations wait for in-flight copies, so the
        // object cannot have moved to another cluster by split or merge.
        if !c.catalogue.holders_of(id).is_ok_and(|h| h.contains(src)) {
            ctx.send(src, Message::DropReplica { id });
        }
    }

    pub(crate) fn on_copy_failed(
        &mut self,
        ctx: &mut Ctx,
        src: NodeId,
        id: ObjectId,
        target: NodeId,
        target_down: bool,
    ) {
        let r = self.ra();
        if target_down && r.cluster.members.contains(&target) {
            self.agent_failed(ctx, target, crate::protocol::MemberKind::Remove, "bounce");
            return;
        }
        if !r.cluster.in_transit.contains_key(&(id, target)) {
            return;
        }
        let nodes: Vec<NodeId> = if target_down { vec![target] } else { vec![src, target] };
        let repair = r.cluster.drop_holders(id, &nodes);
        self.execute_repair(ctx, repair);
    }
}
