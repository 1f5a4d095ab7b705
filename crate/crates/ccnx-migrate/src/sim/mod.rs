//! Deterministic discrete-event network simulator.
//!
//! Events are ordered by `(time, sequence)`, so runs with the same inputs
//! replay exactly. Interests are forwarded hop by hop by longest-prefix
//! match; each Interest records the nodes it crossed and its response
//! retraces them. There is no PIT and no caching. Every link crossing takes
//! the link latency and is dropped with the link's loss probability, drawn
//! from a per-link seeded ChaCha stream.

mod apps;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use ccnx_migrate_core::agent::{Action, MigrationEvent};
use ccnx_migrate_core::routing::{
    AdvertisementTable, Face, FibTable, HandoverModel, NodeId, SdnController,
};
use ccnx_migrate_core::{ContentObject, Interest, Micros, Name};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::scenario::TopologySpec;

pub use apps::{App, DestinationApp, FetcherApp, ProbeApp, ProbeRecord, SourceApp, StoreApp};

pub type AppId = usize;

/// Interests crossing more hops than this are dropped.
const HOP_LIMIT: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("virtual time limit of {0} us exceeded")]
    TimeLimit(Micros),
    #[error("simulation ran out of events before finishing")]
    Stalled,
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} cannot reach node {1}")]
    Unreachable(String, String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub interests_forwarded: u64,
    pub objects_forwarded: u64,
    /// Bytes summed over every link crossing.
    pub wire_bytes: u64,
    pub lost: u64,
    pub no_route: u64,
}

#[derive(Debug, Clone)]
struct Link {
    a: NodeId,
    b: NodeId,
    latency: Micros,
    loss: f64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Default)]
struct NodeState {
    fib: FibTable,
    /// Prefix → application for Interests this node answers itself.
    local: BTreeMap<Name, AppId>,
    adverts: AdvertisementTable,
}

#[derive(Debug, Clone)]
enum Ev {
    Interest {
        at: NodeId,
        interest: Interest,
        trail: Vec<NodeId>,
        origin: AppId,
    },
    Object {
        at: NodeId,
        obj: ContentObject,
        trail: Vec<NodeId>,
        origin: AppId,
    },
    Timer {
        app: AppId,
    },
    Tick {
        app: AppId,
    },
    Route {
        node: NodeId,
        prefix: Name,
        origin: NodeId,
        advertise: bool,
    },
}

struct Scheduled {
    at: Micros,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest first.
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// One timestamped agent event.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub at: Micros,
    pub app: AppId,
    pub node: NodeId,
    #[serde(flatten)]
    pub event: MigrationEvent,
}

/// Route change applied to a node's FIB.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RouteChange {
    pub at: Micros,
    pub node: NodeId,
    pub prefix: String,
    pub face: Option<Face>,
}

pub struct Simulator {
    names: Vec<String>,
    links: Vec<Link>,
    link_index: BTreeMap<(NodeId, NodeId), usize>,
    dist: Vec<Vec<Option<Micros>>>,
    next_hop: Vec<Vec<Option<NodeId>>>,
    nodes: Vec<NodeState>,
    apps: Vec<(NodeId, App)>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: Micros,
    model: HandoverModel,
    controller: SdnController,
    log: Vec<LogEntry>,
    routes: Vec<RouteChange>,
    handovers: Vec<(Micros, Name, NodeId)>,
    stats: NetStats,
}

impl Simulator {
    pub fn new(topology: &TopologySpec, seed: u64, model: HandoverModel) -> Result<Self, SimError> {
        let names: Vec<String> = topology.nodes.iter().map(|n| n.name.clone()).collect();
        let id = |name: &str| -> Result<NodeId, SimError> {
            names
                .iter()
                .position(|n| n == name)
                .map(|i| NodeId(i as u32))
                .ok_or_else(|| SimError::UnknownNode(name.to_string()))
        };
        let mut links = Vec::new();
        let mut link_index = BTreeMap::new();
        for (i, l) in topology.links.iter().enumerate() {
            let (a, b) = (id(&l.a)?, id(&l.b)?);
            let stream = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            links.push(Link {
                a,
                b,
                latency: l.latency_us,
                loss: l.loss,
                rng: ChaCha8Rng::seed_from_u64(stream),
            });
            link_index.insert((a, b), i);
            link_index.insert((b, a), i);
        }
        let n = names.len();
        let mut sim = Simulator {
            names,
            links,
            link_index,
            dist: Vec::new(),
            next_hop: Vec::new(),
            nodes: vec![NodeState::default(); n],
            apps: Vec::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            model,
            controller: SdnController::new(),
            log: Vec::new(),
            routes: Vec::new(),
            handovers: Vec::new(),
            stats: NetStats::default(),
        };
        sim.compute_paths();
        for (i, node) in topology.nodes.iter().enumerate() {
            for p in &node.prefixes {
                sim.route_prefix(p, NodeId(i as u32));
            }
        }
        Ok(sim)
    }

    /// Dijkstra from every node; ties go to the lower node id.
    fn compute_paths(&mut self) {
        let n = self.names.len();
        let mut adj: Vec<Vec<(NodeId, Micros)>> = vec![Vec::new(); n];
        for l in &self.links {
            adj[l.a.0 as usize].push((l.b, l.latency));
            adj[l.b.0 as usize].push((l.a, l.latency));
        }
        for list in &mut adj {
            list.sort();
        }
        self.dist = vec![vec![None; n]; n];
        self.next_hop = vec![vec![None; n]; n];
        for src in 0..n {
            let mut dist: Vec<Option<Micros>> = vec![None; n];
            let mut first: Vec<Option<NodeId>> = vec![None; n];
            let mut done = vec![false; n];
            dist[src] = Some(0);
            while let Some(u) = (0..n)
                .filter(|&i| !done[i] && dist[i].is_some())
                .min_by_key(|&i| (dist[i], i))
            {
                done[u] = true;
                for &(v, w) in &adj[u] {
                    let vi = v.0 as usize;
                    let cand = dist[u].unwrap() + w;
                    let hop = if u == src { Some(v) } else { first[u] };
                    let better = match dist[vi] {
                        None => true,
                        Some(d) => cand < d || (cand == d && hop < first[vi]),
                    };
                    if !done[vi] && better {
                        dist[vi] = Some(cand);
                        first[vi] = hop;
                    }
                }
            }
            self.dist[src] = dist;
            self.next_hop[src] = first;
        }
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| NodeId(i as u32))
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.names[id.0 as usize]
    }

    /// One-way latency of the shortest path.
    pub fn distance(&self, from: NodeId, to: NodeId) -> Option<Micros> {
        self.dist[from.0 as usize][to.0 as usize]
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn route_changes(&self) -> &[RouteChange] {
        &self.routes
    }

    /// Handover actions executed: time, prefix, and new owner.
    pub fn handovers(&self) -> &[(Micros, Name, NodeId)] {
        &self.handovers
    }

    pub fn fib(&self, node: NodeId) -> &FibTable {
        &self.nodes[node.0 as usize].fib
    }

    fn face_toward(&self, node: NodeId, target: NodeId) -> Option<Face> {
        if node == target {
            Some(Face::Local)
        } else {
            self.next_hop[node.0 as usize][target.0 as usize].map(Face::Neighbor)
        }
    }

    fn set_route(&mut self, node: NodeId, prefix: &Name, face: Option<Face>) {
        let fib = &mut self.nodes[node.0 as usize].fib;
        let old = match face {
            Some(f) => fib.insert(prefix.clone(), f),
            None => fib.remove(prefix),
        };
        if old != face {
            self.routes.push(RouteChange {
                at: self.now,
                node,
                prefix: prefix.to_string(),
                face,
            });
        }
    }

    /// Static route: every node forwards `prefix` toward `owner`.
    pub fn route_prefix(&mut self, prefix: &Name, owner: NodeId) {
        for i in 0..self.nodes.len() {
            let node = NodeId(i as u32);
            let face = self.face_toward(node, owner);
            self.set_route(node, prefix, face);
        }
    }

    /// Initial owner of a generic name under the handover model in force.
    pub fn assign_generic(&mut self, prefix: &Name, owner: NodeId) {
        match self.model {
            HandoverModel::External => {}
            HandoverModel::SoftwareDefined => {
                self.controller.assign(prefix.clone(), owner);
                self.route_prefix(prefix, owner);
            }
            HandoverModel::Distributed => {
                for node in &mut self.nodes {
                    node.adverts.advertise(prefix.clone(), owner);
                }
                self.route_prefix(prefix, owner);
            }
        }
    }

    pub fn add_app(&mut self, node: NodeId, app: App) -> AppId {
        self.apps.push((node, app));
        self.apps.len() - 1
    }

    /// Interests reaching `node` for names under `prefix` go to `app`.
    pub fn register_local(&mut self, node: NodeId, prefix: Name, app: AppId) {
        self.nodes[node.0 as usize].local.insert(prefix, app);
    }

    pub fn app(&self, id: AppId) -> &App {
        &self.apps[id].1
    }

    pub fn app_mut(&mut self, id: AppId) -> &mut App {
        &mut self.apps[id].1
    }

    pub fn app_node(&self, id: AppId) -> NodeId {
        self.apps[id].0
    }

    fn schedule(&mut self, at: Micros, ev: Ev) {
        self.seq += 1;
        self.queue.push(Scheduled {
            at,
            seq: self.seq,
            ev,
        });
    }

    pub fn schedule_timer(&mut self, app: AppId, at: Micros) {
        self.schedule(at, Ev::Timer { app });
    }

    pub fn schedule_tick(&mut self, app: AppId, at: Micros) {
        self.schedule(at, Ev::Tick { app });
    }

    /// Starts `app` at the current time.
    pub fn start_app(&mut self, app: AppId) {
        let now = self.now;
        let actions = apps::start(self, app, now);
        self.execute(app, actions);
    }

    /// Processes events until `done` holds, the queue empties, or virtual
    /// time passes `limit`.
    pub fn run_until(
        &mut self,
        limit: Micros,
        mut done: impl FnMut(&Simulator) -> bool,
    ) -> Result<(), SimError> {
        while !done(self) {
            if !self.step(limit)? {
                return Err(SimError::Stalled);
            }
        }
        Ok(())
    }

    /// Processes every remaining event up to `limit`.
    pub fn drain(&mut self, limit: Micros) -> Result<(), SimError> {
        while self.step(limit)? {}
        Ok(())
    }

    fn step(&mut self, limit: Micros) -> Result<bool, SimError> {
        let Some(Scheduled { at, ev, .. }) = self.queue.pop() else {
            return Ok(false);
        };
        if at > limit {
            return Err(SimError::TimeLimit(limit));
        }
        self.now = at;
        match ev {
            Ev::Interest {
                at,
                interest,
                trail,
                origin,
            } => self.on_interest(at, interest, trail, origin),
            Ev::Object {
                at,
                obj,
                trail,
                origin,
            } => self.on_object(at, obj, trail, origin),
            Ev::Timer { app } => {
                let actions = apps::on_timer(self, app, self.now);
                self.execute(app, actions);
            }
            Ev::Tick { app } => {
                let actions = apps::on_tick(self, app, self.now);
                self.execute(app, actions);
            }
            Ev::Route {
                node,
                prefix,
                origin,
                advertise,
            } => {
                let state = &mut self.nodes[node.0 as usize];
                if advertise {
                    state.adverts.advertise(prefix.clone(), origin);
                } else {
                    state.adverts.withdraw(&prefix, origin);
                }
                let face = state
                    .adverts
                    .preferred(&prefix)
                    .and_then(|o| self.face_toward(node, o));
                self.set_route(node, &prefix, face);
            }
        }
        Ok(true)
    }

    /// Sends a packet over the link `from`–`to`, or drops it.
    fn transmit(&mut self, from: NodeId, to: NodeId, bytes: usize) -> Option<Micros> {
        let &li = self.link_index.get(&(from, to))?;
        let link = &mut self.links[li];
        self.stats.wire_bytes += bytes as u64;
        if link.loss > 0.0 && link.rng.gen_bool(link.loss) {
            self.stats.lost += 1;
            return None;
        }
        Some(self.now + link.latency)
    }

    fn on_interest(
        &mut self,
        at: NodeId,
        interest: Interest,
        mut trail: Vec<NodeId>,
        origin: AppId,
    ) {
        trail.push(at);
        let Some(name) = interest.name().cloned() else {
            self.stats.no_route += 1;
            return;
        };
        let node = &self.nodes[at.0 as usize];
        match node.fib.lookup(&name) {
            Some(Face::Local) => {
                let app = (0..=name.len())
                    .rev()
                    .find_map(|len| node.local.get(&name.prefix(len)).copied());
                let Some(app) = app else {
                    self.stats.no_route += 1;
                    return;
                };
                let now = self.now;
                let (reply, actions) = apps::on_interest(self, app, now, &interest);
                self.execute(app, actions);
                if let Some(obj) = reply {
                    self.respond(obj, trail, origin);
                }
            }
            Some(Face::Neighbor(next)) if trail.len() < HOP_LIMIT => {
                self.stats.interests_forwarded += 1;
                if let Some(t) = self.transmit(at, next, interest.encoded_len()) {
                    self.schedule(
                        t,
                        Ev::Interest {
                            at: next,
                            interest,
                            trail,
                            origin,
                        },
                    );
                }
            }
            _ => self.stats.no_route += 1,
        }
    }

    /// Starts a response back along `trail`, whose last element is the
    /// answering node.
    fn respond(&mut self, obj: ContentObject, trail: Vec<NodeId>, origin: AppId) {
        let at = *trail.last().expect("trail includes the answering node");
        self.on_object(at, obj, trail, origin);
    }

    fn on_object(&mut self, at: NodeId, obj: ContentObject, mut trail: Vec<NodeId>, origin: AppId) {
        if trail.len() <= 1 {
            let now = self.now;
            let actions = apps::on_object(self, origin, now, &obj);
            self.execute(origin, actions);
            return;
        }
        trail.pop();
        let next = *trail.last().expect("non-empty");
        self.stats.objects_forwarded += 1;
        if let Some(t) = self.transmit(at, next, obj.encoded_len()) {
            self.schedule(
                t,
                Ev::Object {
                    at: next,
                    obj,
                    trail,
                    origin,
                },
            );
        }
    }

    fn execute(&mut self, app: AppId, actions: Vec<Action>) {
        let node = self.apps[app].0;
        for a in actions {
            match a {
                Action::SendInterest(i) => {
                    let now = self.now;
                    self.schedule(
                        now,
                        Ev::Interest {
                            at: node,
                            interest: i,
                            trail: Vec::new(),
                            origin: app,
                        },
                    );
                }
                Action::Event(event) => {
                    self.log.push(LogEntry {
                        at: self.now,
                        app,
                        node,
                        event: event.clone(),
                    });
                    let follow = apps::on_event(self, app, &event);
                    for (target, actions) in follow {
                        self.execute(target, actions);
                    }
                }
                Action::Handover { prefix } => self.handover(prefix, node),
            }
        }
        apps::rearm(self, app);
    }

    fn handover(&mut self, prefix: Name, to: NodeId) {
        self.handovers.push((self.now, prefix.clone(), to));
        match self.model {
            HandoverModel::External => {}
            HandoverModel::SoftwareDefined => {
                if self.controller.repoint(&prefix, to).is_ok() {
                    self.route_prefix(&prefix, to);
                }
            }
            HandoverModel::Distributed => {
                let old: Vec<NodeId> = self.nodes[to.0 as usize]
                    .adverts
                    .preferred(&prefix)
                    .into_iter()
                    .filter(|o| *o != to)
                    .collect();
                for i in 0..self.nodes.len() {
                    let node = NodeId(i as u32);
                    if let Some(d) = self.distance(to, node) {
                        self.schedule(
                            self.now + d,
                            Ev::Route {
                                node,
                                prefix: prefix.clone(),
                                origin: to,
                                advertise: true,
                            },
                        );
                    }
                    for &o in &old {
                        if let Some(d) = self.distance(o, node) {
                            self.schedule(
                                self.now + d,
                                Ev::Route {
                                    node,
                                    prefix: prefix.clone(),
                                    origin: o,
                                    advertise: false,
                                },
                            );
                        }
                    }
                }
            }
        }
    }
}
