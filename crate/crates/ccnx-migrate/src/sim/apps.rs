//! Applications attached to simulator nodes.

use std::collections::BTreeSet;

use ccnx_migrate_core::agent::{Action, MigrationEvent};
use ccnx_migrate_core::machine::{workload_step, Workload};
use ccnx_migrate_core::migration::{DestinationAgent, MigrationPhase, SourceAgent};
use ccnx_migrate_core::routing::NodeId;
use ccnx_migrate_core::store::ContentStore;
use ccnx_migrate_core::transport::{Delivery, FetchParams, FetchSession, SessionState};
use ccnx_migrate_core::wire::compute_object_hash;
use ccnx_migrate_core::{ContentObject, Hash256, Interest, Micros, Name, NamedAddress};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{AppId, Simulator};

const PROBE: &[u8] = b"probe";

pub enum App {
    Source(SourceApp),
    Destination(DestinationApp),
    Store(StoreApp),
    Fetcher(FetcherApp),
    Probe(ProbeApp),
}

/// Migration source plus the guest workload running on its VM.
pub struct SourceApp {
    pub agent: SourceAgent,
    pub workload: Workload,
    pub rng: ChaCha8Rng,
    pub interval: Micros,
    pub node: NodeId,
    pub writes: u64,
}

pub struct DestinationApp {
    /// `None` once the harness has taken the finished agent back.
    pub agent: Option<DestinationAgent>,
    pub generic_base: Name,
    pub node: NodeId,
    /// Source app rolled back when this destination aborts.
    pub source: Option<AppId>,
    armed: BTreeSet<Micros>,
}

impl DestinationApp {
    pub fn new(
        agent: DestinationAgent,
        generic_base: Name,
        node: NodeId,
        source: Option<AppId>,
    ) -> Self {
        DestinationApp {
            agent: Some(agent),
            generic_base,
            node,
            source,
            armed: BTreeSet::new(),
        }
    }
}

/// Serves hash-named objects, e.g. the blocks of shared read-only disks.
pub struct StoreApp {
    pub store: ContentStore,
    pub served: u64,
}

/// Fetches a fixed list of addresses and records each delivery.
pub struct FetcherApp {
    pub session: FetchSession,
    pub pending: Vec<NamedAddress>,
    pub delivered: Vec<Hash256>,
    pub finished_at: Option<Micros>,
    armed: BTreeSet<Micros>,
}

impl FetcherApp {
    pub fn new(params: FetchParams, addresses: Vec<NamedAddress>) -> Self {
        FetcherApp {
            session: FetchSession::new(params),
            pending: addresses,
            delivered: Vec::new(),
            finished_at: None,
            armed: BTreeSet::new(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished_at.is_some() || self.session.state() == SessionState::Failed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProbeRecord {
    pub seq: u64,
    pub sent_at: Micros,
    pub answered_by: Option<NodeId>,
    pub answered_at: Option<Micros>,
}

/// Sends `<generic>/probe/<n>` at a fixed interval; no retransmission.
pub struct ProbeApp {
    pub generic_base: Name,
    pub interval: Micros,
    pub count: u64,
    pub records: Vec<ProbeRecord>,
}

impl ProbeApp {
    pub fn new(generic_base: Name, interval: Micros, count: u64) -> Self {
        ProbeApp {
            generic_base,
            interval,
            count,
            records: Vec::new(),
        }
    }

    pub fn is_finished(&self, now: Micros) -> bool {
        self.records.len() as u64 == self.count
            && self
                .records
                .last()
                .is_none_or(|r| r.answered_at.is_some() || now > r.sent_at + 10 * self.interval)
    }
}

fn probe_reply(generic: &Name, node: NodeId, interest: &Interest) -> Option<ContentObject> {
    let name = interest.name()?;
    let rest = name.strip_prefix(generic)?;
    if rest.len() == 2 && rest[0].as_bytes() == PROBE {
        Some(ContentObject::named(
            name.clone(),
            node.0.to_be_bytes().to_vec(),
        ))
    } else {
        None
    }
}

pub(super) fn start(sim: &mut Simulator, id: AppId, now: Micros) -> Vec<Action> {
    let mut tick = None;
    let actions = match &mut sim.apps[id].1 {
        App::Source(s) => {
            tick = Some(now + s.interval);
            s.agent.start(now).unwrap_or_default()
        }
        App::Destination(d) => d.agent.as_mut().map(|a| a.start(now)).unwrap_or_default(),
        App::Fetcher(f) => {
            for a in std::mem::take(&mut f.pending) {
                f.session.enqueue(a);
            }
            f.session
                .poll_transmit(now)
                .into_iter()
                .map(Action::SendInterest)
                .collect()
        }
        App::Probe(_) => {
            tick = Some(now);
            Vec::new()
        }
        App::Store(_) => Vec::new(),
    };
    if let Some(t) = tick {
        sim.schedule_tick(id, t);
    }
    actions
}

pub(super) fn on_interest(
    sim: &mut Simulator,
    id: AppId,
    now: Micros,
    interest: &Interest,
) -> (Option<ContentObject>, Vec<Action>) {
    match &mut sim.apps[id].1 {
        App::Source(s) => {
            if let Some(r) = probe_reply(&s.agent.plan().generic_base, s.node, interest) {
                return (Some(r), Vec::new());
            }
            s.agent.on_interest(now, interest)
        }
        App::Destination(d) => (probe_reply(&d.generic_base, d.node, interest), Vec::new()),
        App::Store(st) => {
            let obj = st.store.get(&interest.address).cloned();
            if obj.is_some() {
                st.served += 1;
            }
            (obj, Vec::new())
        }
        App::Fetcher(_) | App::Probe(_) => (None, Vec::new()),
    }
}

pub(super) fn on_object(
    sim: &mut Simulator,
    id: AppId,
    now: Micros,
    obj: &ContentObject,
) -> Vec<Action> {
    match &mut sim.apps[id].1 {
        App::Destination(d) => d
            .agent
            .as_mut()
            .map(|a| a.on_object(now, obj))
            .unwrap_or_default(),
        App::Fetcher(f) => {
            let Ok(hash) = compute_object_hash(obj) else {
                return Vec::new();
            };
            if f.session.on_object(obj, &hash) == Delivery::New {
                f.delivered.push(hash);
            }
            if f.finished_at.is_none() && f.session.is_idle() {
                f.finished_at = Some(now);
            }
            f.session
                .poll_transmit(now)
                .into_iter()
                .map(Action::SendInterest)
                .collect()
        }
        App::Probe(p) => {
            let seq = obj
                .name
                .as_ref()
                .and_then(|n| n.last())
                .and_then(|s| s.as_str())
                .and_then(|s| s.parse::<u64>().ok());
            if let (Some(seq), Ok(bytes)) = (seq, <[u8; 4]>::try_from(&obj.payload[..])) {
                if let Some(r) = p.records.get_mut(seq as usize) {
                    if r.answered_at.is_none() {
                        r.answered_by = Some(NodeId(u32::from_be_bytes(bytes)));
                        r.answered_at = Some(now);
                    }
                }
            }
            Vec::new()
        }
        App::Source(_) | App::Store(_) => Vec::new(),
    }
}

pub(super) fn on_timer(sim: &mut Simulator, id: AppId, now: Micros) -> Vec<Action> {
    match &mut sim.apps[id].1 {
        App::Destination(d) => {
            d.armed.remove(&now);
            d.agent
                .as_mut()
                .map(|a| a.on_timer(now))
                .unwrap_or_default()
        }
        App::Fetcher(f) => {
            f.armed.remove(&now);
            f.session
                .poll_transmit(now)
                .into_iter()
                .map(Action::SendInterest)
                .collect()
        }
        _ => Vec::new(),
    }
}

pub(super) fn on_tick(sim: &mut Simulator, id: AppId, now: Micros) -> Vec<Action> {
    let mut next = None;
    let mut actions = Vec::new();
    match &mut sim.apps[id].1 {
        App::Source(s) => {
            if s.agent.session().phase == MigrationPhase::Push && !s.agent.image().is_frozen() {
                s.writes += workload_step(s.agent.image_mut(), &s.workload, &mut s.rng) as u64;
                next = Some(now + s.interval);
            }
        }
        App::Probe(p) => {
            let seq = p.records.len() as u64;
            if seq < p.count {
                let name = p.generic_base.child(PROBE).child(seq.to_string());
                p.records.push(ProbeRecord {
                    seq,
                    sent_at: now,
                    answered_by: None,
                    answered_at: None,
                });
                actions.push(Action::SendInterest(Interest::for_name(name)));
                if seq + 1 < p.count {
                    next = Some(now + p.interval);
                }
            }
        }
        _ => {}
    }
    if let Some(t) = next {
        sim.schedule_tick(id, t);
    }
    actions
}

/// Follow-up work triggered by an agent event.
pub(super) fn on_event(
    sim: &mut Simulator,
    id: AppId,
    event: &MigrationEvent,
) -> Vec<(AppId, Vec<Action>)> {
    let App::Destination(d) = &sim.apps[id].1 else {
        return Vec::new();
    };
    match (event, d.source) {
        (MigrationEvent::Aborted { .. }, Some(src)) => match &mut sim.apps[src].1 {
            App::Source(s) => Vec::from([(src, s.agent.rollback())]),
            _ => Vec::new(),
        },
        _ => Vec::new(),
    }
}

/// Schedules a timer for the app's next retransmission deadline.
pub(super) fn rearm(sim: &mut Simulator, id: AppId) {
    let now = sim.now;
    let deadline = match &mut sim.apps[id].1 {
        App::Destination(d) => d
            .agent
            .as_ref()
            .and_then(|a| a.next_deadline())
            .map(|t| t.max(now))
            .filter(|t| d.armed.insert(*t)),
        App::Fetcher(f) => f
            .session
            .next_deadline()
            .map(|t| t.max(now))
            .filter(|t| f.armed.insert(*t)),
        _ => None,
    };
    if let Some(t) = deadline {
        sim.schedule_timer(id, t);
    }
}
