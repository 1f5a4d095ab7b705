//! Pre-copy migration agents.
//!
//! The source publishes checkpoint versions 0, 1, 2, ... Each push round
//! carries resources dirtied since the previous snapshot (round 0: all cold
//! resources). When the stop policy fires the source freezes and publishes
//! a stop-and-copy checkpoint with the CPU state, config, hot set, and the
//! last dirty set. One final pull checkpoint carries the unclassified
//! remainder, read from the frozen state.
//!
//! The destination polls `.../ver=j/manifest`, fetches the chunks and the
//! entries it does not already hold, applies them, and closes the version.
//! It starts the VM when the stop-and-copy version closes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AbortReason, Action, MigrationEvent};
use crate::hash::Hash256;
use crate::machine::{decode_config, Locator, ResourceKind, Snapshot, VmImage};
use crate::manifest::{
    apply_entry_hashed, build_manifest, checkpoint_name, chunk_name, entry_fetch_address,
    manifest_name, parse_manifest, parse_root, Addressing, Manifest, ManifestError, ManifestPlan,
    NamingMode, Phase, DEFAULT_CHUNK_LIMIT,
};
use crate::name::Name;
use crate::routing::{HandoverModel, NodeId};
use crate::store::{CheckpointId, ContentStore};
use crate::transport::{
    ack_object, CloseReply, CloseResponder, CloseState, Delivery, FetchParams, FetchSession,
    SessionState, TransportMetrics,
};
use crate::wire::{compute_object_hash, ContentObject, Interest, NamedAddress};
use crate::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopPolicy {
    pub alpha: f64,
    pub max_rounds: u32,
}

impl Default for StopPolicy {
    fn default() -> Self {
        StopPolicy {
            alpha: 0.9,
            max_rounds: 10,
        }
    }
}

/// Whether to leave the push phase given the dirty bytes of each completed
/// round: stop on a clean round, on diminishing returns
/// (`last > alpha * previous`), or at the round cap.
pub fn should_stop_push(trace: &[u64], policy: &StopPolicy) -> bool {
    let Some(&last) = trace.last() else {
        return false;
    };
    if last == 0 || trace.len() as u64 >= policy.max_rounds as u64 {
        return true;
    }
    match trace.len().checked_sub(2).map(|i| trace[i]) {
        Some(prev) => last as f64 > policy.alpha * prev as f64,
        None => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrationPhase {
    Push,
    StopAndCopy,
    Pull,
    Done,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushRound {
    pub version: u64,
    pub entries: usize,
    pub transferred_bytes: u64,
    /// Bytes of push-eligible resources written while this round was
    /// being transferred.
    pub dirty_bytes: u64,
    pub published_at: Micros,
    pub closed_at: Option<Micros>,
}

impl PushRound {
    pub fn round_duration(&self) -> Option<Micros> {
        self.closed_at.map(|c| c - self.published_at)
    }
}

/// Source-side record of one migration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationSession {
    pub vm_name: Name,
    pub source: NodeId,
    pub destination: NodeId,
    pub current_version: u64,
    pub phase: MigrationPhase,
    pub push_history: Vec<PushRound>,
    pub stop_policy: StopPolicy,
}

impl MigrationSession {
    pub fn dirty_trace(&self) -> Vec<u64> {
        self.push_history.iter().map(|r| r.dirty_bytes).collect()
    }

    pub fn rounds(&self) -> usize {
        self.push_history.len()
    }
}

/// Splits resources into hot (moved at stop-and-copy), unclassified (left
/// for the pull phase), and cold (everything else, pushed). CPU state is
/// always moved at stop-and-copy.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceClassifier {
    pub hot: BTreeSet<Locator>,
    pub unclassified: BTreeSet<Locator>,
}

impl ResourceClassifier {
    pub fn is_pushable(&self, loc: &Locator) -> bool {
        !matches!(loc.kind, ResourceKind::CpuRegfile | ResourceKind::CpuTlb)
            && !self.hot.contains(loc)
            && !self.unclassified.contains(loc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MigrationError {
    #[error("close handshake for version {0} has not completed")]
    CloseNotCompleted(u64),
    #[error("version {0} was never published")]
    UnknownVersion(u64),
    #[error("version {0} already released")]
    AlreadyReleased(u64),
    #[error("migration already started")]
    AlreadyStarted,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Image(#[from] crate::machine::ImageError),
}

#[derive(Debug, Clone)]
pub struct SourcePlan {
    pub source: NodeId,
    pub destination: NodeId,
    /// Generic name, e.g. `/vm-name`.
    pub generic_base: Name,
    /// Location-dependent name, e.g. `/nyc/host7/vm-name`.
    pub location_base: Name,
    pub model: HandoverModel,
    /// Naming for RAM pages and disk blocks in push rounds.
    pub push_naming: NamingMode,
    pub classifier: ResourceClassifier,
    pub stop: StopPolicy,
    pub chunk_limit: usize,
    /// Routing prefixes for strong entries of particular kinds, e.g. a
    /// shared object store for a read-only disk.
    pub prefix_overrides: BTreeMap<ResourceKind, Name>,
}

impl SourcePlan {
    pub fn new(generic_base: Name, location_base: Name, model: HandoverModel) -> Self {
        SourcePlan {
            source: NodeId(0),
            destination: NodeId(0),
            generic_base,
            location_base,
            model,
            push_naming: NamingMode::Strong,
            classifier: ResourceClassifier::default(),
            stop: StopPolicy::default(),
            chunk_limit: DEFAULT_CHUNK_LIMIT,
            prefix_overrides: BTreeMap::new(),
        }
    }

    /// Base name of checkpoints in `phase`.
    pub fn base_for(&self, phase: Phase) -> &Name {
        if phase != Phase::Pull && self.model.uses_generic_name() {
            &self.generic_base
        } else {
            &self.location_base
        }
    }
}

#[derive(Debug, Clone)]
struct Published {
    phase: Phase,
    base: Name,
    weak: bool,
    responder: CloseResponder,
    released: bool,
}

#[derive(Debug, Clone)]
pub struct SourceAgent {
    plan: SourcePlan,
    image: VmImage,
    store: ContentStore,
    session: MigrationSession,
    published: BTreeMap<u64, Published>,
    pushable: BTreeSet<Locator>,
    frozen: Option<Snapshot>,
    started: bool,
}

impl SourceAgent {
    pub fn new(image: VmImage, mut plan: SourcePlan) -> Self {
        let all: BTreeSet<Locator> = image.data().locators().into_iter().collect();
        plan.classifier.hot.retain(|l| all.contains(l));
        plan.classifier.unclassified.retain(|l| all.contains(l));
        let pushable = all
            .into_iter()
            .filter(|l| plan.classifier.is_pushable(l))
            .collect();
        let session = MigrationSession {
            vm_name: image.config().vm_name.clone(),
            source: plan.source,
            destination: plan.destination,
            current_version: 0,
            phase: MigrationPhase::Push,
            push_history: Vec::new(),
            stop_policy: plan.stop,
        };
        SourceAgent {
            plan,
            image,
            store: ContentStore::new(),
            session,
            published: BTreeMap::new(),
            pushable,
            frozen: None,
            started: false,
        }
    }

    pub fn plan(&self) -> &SourcePlan {
        &self.plan
    }

    pub fn image(&self) -> &VmImage {
        &self.image
    }

    /// The running VM, for the guest workload.
    pub fn image_mut(&mut self) -> &mut VmImage {
        &mut self.image
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn session(&self) -> &MigrationSession {
        &self.session
    }

    /// State captured at stop-and-copy; the destination must end up equal
    /// to it.
    pub fn frozen_state(&self) -> Option<&Snapshot> {
        self.frozen.as_ref()
    }

    pub fn close_state(&self, version: u64) -> Option<CloseState> {
        self.published.get(&version).map(|p| p.responder.state())
    }

    /// Publishes checkpoint 0.
    pub fn start(&mut self, now: Micros) -> Result<Vec<Action>, MigrationError> {
        if self.started {
            return Err(MigrationError::AlreadyStarted);
        }
        self.started = true;
        let selection = self.pushable.clone();
        let mut actions = Vec::new();
        self.publish(now, 0, Phase::Push, selection, &mut actions)?;
        Ok(actions)
    }

    fn owner(&self, version: u64) -> CheckpointId {
        CheckpointId::new(self.session.vm_name.clone(), version)
    }

    fn publish(
        &mut self,
        now: Micros,
        version: u64,
        phase: Phase,
        selection: BTreeSet<Locator>,
        actions: &mut Vec<Action>,
    ) -> Result<(), MigrationError> {
        let snapshot = self.image.snapshot(version)?;
        let base = self.plan.base_for(phase).clone();
        let mut mplan = ManifestPlan::new(base.clone(), version, phase);
        mplan.chunk_limit = self.plan.chunk_limit;
        let weak = phase == Phase::Push && self.plan.push_naming == NamingMode::Weak;
        if weak {
            mplan.modes.insert(ResourceKind::RamPage, NamingMode::Weak);
            for d in 0..self.image.config().disks.len() as u16 {
                mplan
                    .modes
                    .insert(ResourceKind::DiskBlock { disk: d }, NamingMode::Weak);
            }
        }
        mplan.prefix_overrides = self.plan.prefix_overrides.clone();
        let owner = self.owner(version);
        let built = build_manifest(&snapshot, &selection, &mplan, &mut self.store, &owner)?;
        if phase == Phase::StopAndCopy {
            self.frozen = Some(snapshot);
        }
        if phase == Phase::Push {
            self.session.push_history.push(PushRound {
                version,
                entries: built.manifest.entry_count(),
                transferred_bytes: built.payload_bytes,
                dirty_bytes: 0,
                published_at: now,
                closed_at: None,
            });
        }
        self.session.current_version = version;
        self.session.phase = match phase {
            Phase::Push => MigrationPhase::Push,
            Phase::StopAndCopy => MigrationPhase::StopAndCopy,
            Phase::Pull => MigrationPhase::Pull,
        };
        self.published.insert(
            version,
            Published {
                phase,
                base,
                weak,
                responder: CloseResponder::new(),
                released: false,
            },
        );
        actions.push(Action::Event(MigrationEvent::Published {
            version,
            phase,
            entries: built.manifest.entry_count(),
            payload_bytes: built.payload_bytes,
            manifest_bytes: built.manifest_bytes(),
            chunks: built.manifest.chunk_count,
        }));
        Ok(())
    }

    /// Drops the store references of a closed version.
    pub fn release_after_close(&mut self, version: u64) -> Result<usize, MigrationError> {
        let p = self
            .published
            .get_mut(&version)
            .ok_or(MigrationError::UnknownVersion(version))?;
        if p.responder.state() != CloseState::Released {
            return Err(MigrationError::CloseNotCompleted(version));
        }
        if p.released {
            return Err(MigrationError::AlreadyReleased(version));
        }
        p.released = true;
        let owner = self.owner(version);
        Ok(self.store.release(&owner))
    }

    /// Answers an Interest; the returned object travels back to the
    /// requester.
    pub fn on_interest(
        &mut self,
        now: Micros,
        interest: &Interest,
    ) -> (Option<ContentObject>, Vec<Action>) {
        let mut actions = Vec::new();
        if interest.address.hash_restr.is_some() {
            return (self.store.get(&interest.address).cloned(), actions);
        }
        let Some(name) = interest.name() else {
            return (None, actions);
        };
        let Some((version, tail)) = self.parse_checkpoint_name(name) else {
            return (None, actions);
        };
        let Some(p) = self.published.get(&version) else {
            return (None, actions);
        };
        if !p.base.is_prefix_of(name) {
            return (None, actions);
        }
        let tail: Vec<&[u8]> = tail.iter().map(|s| s.as_bytes()).collect();
        let reply = match tail.as_slice() {
            [b"close"] => {
                let p = self.published.get_mut(&version).expect("published");
                p.responder.on_close();
                Some(ack_object(name.clone()))
            }
            [b"close-ack"] => {
                let p = self.published.get_mut(&version).expect("published");
                match p.responder.on_close_ack() {
                    CloseReply::Ignore => None,
                    CloseReply::Ack { release } => {
                        if release {
                            self.on_closed(now, version, &mut actions);
                        }
                        Some(ack_object(name.clone()))
                    }
                }
            }
            [b"manifest", ..] => {
                if p.released {
                    None
                } else {
                    self.store.get(&NamedAddress::named(name.clone())).cloned()
                }
            }
            _ if p.weak && !p.released => {
                let segs = &name.segments()[p.base.len() + 2..];
                Locator::from_relative(self.image.config(), segs)
                    .filter(|l| self.pushable.contains(l))
                    .and_then(|l| self.image.read(&l))
                    .map(|data| ContentObject::named(name.clone(), data.clone()))
            }
            _ => None,
        };
        (reply, actions)
    }

    fn parse_checkpoint_name<'n>(
        &self,
        name: &'n Name,
    ) -> Option<(u64, &'n [crate::name::Segment])> {
        for base in [&self.plan.generic_base, &self.plan.location_base] {
            let Some(rest) = name.strip_prefix(base) else {
                continue;
            };
            if rest.len() >= 3 && rest[0].as_bytes() == b"checkpoint" {
                if let Some(v) = rest[1].tagged_number("ver") {
                    return Some((v, &rest[2..]));
                }
            }
        }
        None
    }

    /// Close handshake for `version` finished: publish what comes next,
    /// then release the closed version so shared objects keep their
    /// references.
    fn on_closed(&mut self, now: Micros, version: u64, actions: &mut Vec<Action>) {
        let phase = self.published[&version].phase;
        let next = version + 1;
        let result = match phase {
            Phase::Push => {
                let dirty: BTreeSet<Locator> = self
                    .image
                    .dirty_set(version)
                    .unwrap_or_default()
                    .into_iter()
                    .filter(|l| self.pushable.contains(l))
                    .collect();
                let dirty_bytes: u64 = dirty
                    .iter()
                    .filter_map(|l| self.image.resource_size(l))
                    .map(|s| s as u64)
                    .sum();
                if let Some(r) = self.session.push_history.last_mut() {
                    r.dirty_bytes = dirty_bytes;
                    r.closed_at = Some(now);
                }
                if should_stop_push(&self.session.dirty_trace(), &self.plan.stop) {
                    self.image.freeze();
                    actions.push(Action::Event(MigrationEvent::Frozen { version: next }));
                    let mut sel = dirty;
                    sel.extend(self.image.data().locators().into_iter().filter(|l| {
                        matches!(
                            l.kind,
                            ResourceKind::Config | ResourceKind::CpuRegfile | ResourceKind::CpuTlb
                        )
                    }));
                    sel.extend(self.plan.classifier.hot.iter().copied());
                    self.publish(now, next, Phase::StopAndCopy, sel, actions)
                } else {
                    self.publish(now, next, Phase::Push, dirty, actions)
                }
            }
            Phase::StopAndCopy => {
                let sel = self.plan.classifier.unclassified.clone();
                self.publish(now, next, Phase::Pull, sel, actions)
            }
            Phase::Pull => {
                self.session.phase = MigrationPhase::Done;
                actions.push(Action::Event(MigrationEvent::Completed));
                Ok(())
            }
        };
        if let Err(e) = result {
            // Building from our own snapshot only fails on a bug.
            panic!("failed to publish checkpoint {next}: {e}");
        }
        if let Ok(evicted) = self.release_after_close(version) {
            actions.push(Action::Event(MigrationEvent::Released { version, evicted }));
        }
    }

    /// Abandons the migration: the source stays authoritative and its VM
    /// runs again.
    pub fn rollback(&mut self) -> Vec<Action> {
        self.image.unfreeze();
        self.session.phase = MigrationPhase::Aborted;
        for (v, p) in self.published.iter_mut() {
            if !p.released {
                p.released = true;
                self.store
                    .release(&CheckpointId::new(self.session.vm_name.clone(), *v));
            }
        }
        Vec::from([Action::Event(MigrationEvent::RolledBack)])
    }
}

#[derive(Debug, Clone)]
pub struct DestinationPlan {
    pub generic_base: Name,
    /// The source's location-dependent name, used for the pull phase (and
    /// for everything in the external model).
    pub location_base: Name,
    pub model: HandoverModel,
    pub params: FetchParams,
}

impl DestinationPlan {
    fn base_for(&self, phase_after_handover: bool) -> &Name {
        if !phase_after_handover && self.model.uses_generic_name() {
            &self.generic_base
        } else {
            &self.location_base
        }
    }
}

/// Destination-side record of one checkpoint version.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionMetrics {
    pub version: u64,
    pub phase: Option<Phase>,
    pub chunks: u32,
    pub entries: u64,
    /// Distinct hash-named objects fetched over the network.
    pub unique_fetched: u64,
    /// Strong entries satisfied without a fetch: already held by the
    /// destination store or repeated within this manifest.
    pub dedup_hits: u64,
    /// Encoded bytes of the objects behind `dedup_hits`.
    pub dedup_saved_bytes: u64,
    pub weak_fetched: u64,
    pub payload_bytes_applied: u64,
    /// Encoded bytes of the data objects fetched (manifest chunks and
    /// handshake excluded).
    pub data_object_bytes: u64,
    pub manifest_bytes: u64,
    pub transport: TransportMetrics,
    pub polled_at: Micros,
    pub manifest_at: Option<Micros>,
    pub closing_at: Option<Micros>,
    pub closed_at: Option<Micros>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Polling,
    Chunks { count: u32 },
    Entries,
    Closing,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
pub struct DestinationAgent {
    plan: DestinationPlan,
    store: ContentStore,
    image: Option<VmImage>,
    version: u64,
    handed_over: bool,
    stage: Stage,
    session: FetchSession,
    chunks: Vec<ContentObject>,
    manifest: Option<Manifest>,
    weak: BTreeMap<Name, ContentObject>,
    repeats: Vec<Hash256>,
    last_phase: Option<Phase>,
    vm_name: Option<Name>,
    history: Vec<VersionMetrics>,
    current: VersionMetrics,
    started_vm: bool,
}

impl DestinationAgent {
    /// `store` is the destination host's store, possibly already holding
    /// objects from earlier migrations.
    pub fn new(plan: DestinationPlan, store: ContentStore) -> Self {
        let session = FetchSession::new(plan.params);
        DestinationAgent {
            plan,
            store,
            image: None,
            version: 0,
            handed_over: false,
            stage: Stage::Polling,
            session,
            chunks: Vec::new(),
            manifest: None,
            weak: BTreeMap::new(),
            repeats: Vec::new(),
            last_phase: None,
            vm_name: None,
            history: Vec::new(),
            current: VersionMetrics::default(),
            started_vm: false,
        }
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn into_parts(self) -> (Option<VmImage>, ContentStore) {
        (self.image, self.store)
    }

    pub fn image(&self) -> Option<&VmImage> {
        self.image.as_ref()
    }

    pub fn history(&self) -> &[VersionMetrics] {
        &self.history
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }

    pub fn is_failed(&self) -> bool {
        self.stage == Stage::Failed
    }

    pub fn vm_started(&self) -> bool {
        self.started_vm
    }

    fn base(&self) -> &Name {
        self.plan.base_for(self.handed_over)
    }

    /// Begins polling for checkpoint 0.
    pub fn start(&mut self, now: Micros) -> Vec<Action> {
        self.begin_version(now, 0);
        self.transmit(now)
    }

    fn begin_version(&mut self, now: Micros, version: u64) {
        self.version = version;
        self.stage = Stage::Polling;
        self.session = FetchSession::new(self.plan.params);
        self.chunks.clear();
        self.manifest = None;
        self.weak.clear();
        self.repeats.clear();
        self.current = VersionMetrics {
            version,
            polled_at: now,
            ..VersionMetrics::default()
        };
        let poll = manifest_name(self.base(), version);
        self.session.enqueue_poll(NamedAddress::named(poll));
    }

    pub fn next_deadline(&self) -> Option<Micros> {
        match self.stage {
            Stage::Done | Stage::Failed => None,
            _ => self.session.next_deadline(),
        }
    }

    pub fn on_timer(&mut self, now: Micros) -> Vec<Action> {
        self.transmit(now)
    }

    fn transmit(&mut self, now: Micros) -> Vec<Action> {
        if matches!(self.stage, Stage::Done | Stage::Failed) {
            return Vec::new();
        }
        let mut actions: Vec<Action> = self
            .session
            .poll_transmit(now)
            .into_iter()
            .map(Action::SendInterest)
            .collect();
        if self.session.state() == SessionState::Failed {
            let missing = self.session.missing().to_vec();
            self.abort(AbortReason::Transport { missing }, &mut actions);
        }
        actions
    }

    fn abort(&mut self, reason: AbortReason, actions: &mut Vec<Action>) {
        self.stage = Stage::Failed;
        self.current.transport = *self.session.metrics();
        self.history.push(self.current.clone());
        actions.push(Action::Event(MigrationEvent::Aborted {
            version: self.version,
            reason,
        }));
    }

    fn bad_manifest(&mut self, detail: impl ToString, actions: &mut Vec<Action>) {
        let detail = detail.to_string();
        self.abort(AbortReason::BadManifest { detail }, actions);
    }

    pub fn on_object(&mut self, now: Micros, obj: &ContentObject) -> Vec<Action> {
        let mut actions = Vec::new();
        if matches!(self.stage, Stage::Done | Stage::Failed) {
            return actions;
        }
        let Ok(hash) = compute_object_hash(obj) else {
            return actions;
        };
        if self.session.on_object(obj, &hash) != Delivery::New {
            return actions;
        }
        match self.stage {
            Stage::Polling => self.on_root(now, obj, &mut actions),
            Stage::Chunks { count } => {
                self.current.manifest_bytes += obj.encoded_len() as u64;
                self.chunks.push(obj.clone());
                if self.chunks.len() as u32 == count {
                    self.on_manifest(now, &mut actions);
                }
            }
            Stage::Entries => {
                self.current.data_object_bytes += obj.encoded_len() as u64;
                match &obj.name {
                    None => {
                        self.current.unique_fetched += 1;
                        let owner = self.owner();
                        self.store.put_hashed(obj.clone(), hash, &owner);
                    }
                    Some(name) => {
                        self.current.weak_fetched += 1;
                        self.weak.insert(name.clone(), obj.clone());
                    }
                }
                if self.session.is_idle() {
                    self.finish_entries(now, &mut actions);
                }
            }
            Stage::Closing => {
                if self.session.state() == SessionState::Closed {
                    self.on_version_closed(now, &mut actions);
                }
            }
            Stage::Done | Stage::Failed => {}
        }
        if !matches!(self.stage, Stage::Done | Stage::Failed) {
            let sent = self.transmit(now);
            actions.extend(sent);
        }
        actions
    }

    fn owner(&self) -> CheckpointId {
        let vm = self.vm_name.clone().unwrap_or_else(Name::root);
        CheckpointId::new(vm, self.version)
    }

    fn on_root(&mut self, now: Micros, obj: &ContentObject, actions: &mut Vec<Action>) {
        let (version, phase, count) = match parse_root(obj) {
            Ok(r) => r,
            Err(e) => return self.bad_manifest(e, actions),
        };
        if version != self.version {
            return self.bad_manifest(
                "manifest version does not match the polled version",
                actions,
            );
        }
        let order_ok = matches!(
            (self.last_phase, phase),
            (None, Phase::Push)
                | (Some(Phase::Push), Phase::Push | Phase::StopAndCopy)
                | (Some(Phase::StopAndCopy), Phase::Pull)
        );
        if !order_ok {
            return self.bad_manifest("manifest phase out of order", actions);
        }
        self.current.phase = Some(phase);
        self.current.chunks = count;
        self.current.manifest_bytes += obj.encoded_len() as u64;
        self.chunks = Vec::from([obj.clone()]);
        if count > 1 {
            let base = self.base().clone();
            for k in 1..count {
                self.session
                    .enqueue(NamedAddress::named(chunk_name(&base, version, k)));
            }
            self.stage = Stage::Chunks { count };
        } else {
            self.on_manifest(now, actions);
        }
    }

    fn on_manifest(&mut self, now: Micros, actions: &mut Vec<Action>) {
        let manifest = match parse_manifest(&self.chunks) {
            Ok(m) => m,
            Err(e) => return self.bad_manifest(e, actions),
        };
        self.chunks.clear();
        if let Some(vm) = &self.vm_name {
            if *vm != manifest.vm_name {
                return self.bad_manifest("manifest names a different VM", actions);
            }
        }
        self.vm_name = Some(manifest.vm_name.clone());
        self.current.manifest_at = Some(now);
        self.current.entries = manifest.entry_count() as u64;
        self.last_phase = Some(manifest.phase);
        actions.push(Action::Event(MigrationEvent::ManifestReceived {
            version: manifest.version,
            phase: manifest.phase,
        }));
        let owner = self.owner();
        let mut seen: BTreeSet<Hash256> = BTreeSet::new();
        for e in manifest.entries() {
            match &e.addressing {
                Addressing::Strong { hash, .. } => {
                    if !seen.insert(*hash) {
                        self.current.dedup_hits += 1;
                        self.repeats.push(*hash);
                    } else if let Some(obj) = self.store.get_by_hash(hash).cloned() {
                        self.current.dedup_hits += 1;
                        self.current.dedup_saved_bytes += obj.encoded_len() as u64;
                        self.store.put_hashed(obj, *hash, &owner);
                    } else {
                        self.session.enqueue(entry_fetch_address(e));
                    }
                }
                Addressing::Weak { .. } => {
                    self.session.enqueue(entry_fetch_address(e));
                }
            }
        }
        self.manifest = Some(manifest);
        self.stage = Stage::Entries;
        if self.session.is_idle() {
            self.finish_entries(now, actions);
        }
    }

    fn finish_entries(&mut self, now: Micros, actions: &mut Vec<Action>) {
        let manifest = self.manifest.take().expect("manifest parsed");
        if let Err(detail) = self.apply(&manifest) {
            self.abort(AbortReason::Apply { detail }, actions);
            return;
        }
        self.weak.clear();
        for h in core::mem::take(&mut self.repeats) {
            if let Some(obj) = self.store.get_by_hash(&h) {
                self.current.dedup_saved_bytes += obj.encoded_len() as u64;
            }
        }
        self.last_phase = Some(manifest.phase);
        self.manifest = Some(manifest);
        let cp = checkpoint_name(self.base(), self.version);
        self.session.begin_close(&cp);
        self.current.closing_at = Some(now);
        self.stage = Stage::Closing;
    }

    fn apply(&mut self, manifest: &Manifest) -> Result<(), alloc::string::String> {
        if self.image.is_none() {
            let entry = manifest
                .entries()
                .find(|e| e.locator == Locator::config())
                .ok_or("first checkpoint carries no VM config")?;
            let obj = self.lookup(entry).ok_or("config object missing")?;
            let config = decode_config(&obj.payload).map_err(|e| e.to_string())?;
            config.validate().map_err(|e| e.to_string())?;
            let mut image = VmImage::blank(&config);
            image.freeze();
            self.image = Some(image);
        }
        for e in manifest.entries() {
            let obj = self
                .lookup(e)
                .ok_or_else(|| alloc::format!("object for {} missing", e.locator))?;
            let image = self.image.as_mut().expect("allocated above");
            let placed = apply_entry_hashed(image, e, &obj, e.hash().copied())
                .map_err(|err| err.to_string())?;
            self.current.payload_bytes_applied += placed.bytes as u64;
        }
        Ok(())
    }

    fn lookup(&self, e: &crate::manifest::ManifestEntry) -> Option<ContentObject> {
        match &e.addressing {
            Addressing::Strong { hash, .. } => self.store.get_by_hash(hash).cloned(),
            Addressing::Weak { name } => self.weak.get(name).cloned(),
        }
    }

    fn on_version_closed(&mut self, now: Micros, actions: &mut Vec<Action>) {
        let phase = self.last_phase.expect("manifest seen");
        self.current.closed_at = Some(now);
        self.current.transport = *self.session.metrics();
        self.history.push(core::mem::take(&mut self.current));
        actions.push(Action::Event(MigrationEvent::VersionClosed {
            version: self.version,
            phase,
        }));
        match phase {
            Phase::Push => self.begin_version(now, self.version + 1),
            Phase::StopAndCopy => {
                if let Some(img) = self.image.as_mut() {
                    img.unfreeze();
                }
                self.started_vm = true;
                actions.push(Action::Event(MigrationEvent::VmStarted {
                    version: self.version,
                }));
                if self.plan.model.uses_generic_name() {
                    actions.push(Action::Handover {
                        prefix: self.plan.generic_base.clone(),
                    });
                }
                self.handed_over = true;
                self.begin_version(now, self.version + 1);
            }
            Phase::Pull => {
                self.stage = Stage::Done;
                actions.push(Action::Event(MigrationEvent::Completed));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{build_vm, workload_step, DiskConfig, VmConfig, Workload};
    use alloc::vec;
    use rand::SeedableRng;

    #[test]
    fn stop_rule_examples() {
        let p = StopPolicy::default();
        assert!(!should_stop_push(&[], &p));
        assert!(should_stop_push(&[1000, 0], &p));
        assert!(should_stop_push(&[0], &p));
        assert!(should_stop_push(&[1000, 950], &p));
        assert!(!should_stop_push(&[1000, 900], &p));
        assert!(!should_stop_push(&[1000], &p));
        let flat = StopPolicy {
            alpha: 1.0,
            max_rounds: 10,
        };
        let mut trace = Vec::new();
        let mut rounds = 0;
        loop {
            trace.push(4096);
            rounds += 1;
            if should_stop_push(&trace, &flat) {
                break;
            }
        }
        assert_eq!(rounds, 10);
    }

    fn config() -> VmConfig {
        VmConfig {
            vm_name: Name::parse("/vm-name").unwrap(),
            cpu_n: 2,
            ram_bytes: 32 * 4096,
            page_size: 4096,
            disks: vec![DiskConfig {
                disk_name: "hda".into(),
                capacity_bytes: 128 * 512,
                block_size: 512,
                fill_ratio: 0.5,
                read_only: false,
                content_seed: None,
            }],
            net_interfaces: vec!["en0".into()],
            regfile_size: 512,
            tlb_size: 4096,
            vhd_struct_size: 512,
            net_state_size: 256,
        }
    }

    fn plans(model: HandoverModel) -> (SourcePlan, DestinationPlan) {
        let g = Name::parse("/vm-name").unwrap();
        let l = Name::parse("/nyc/host7/vm-name").unwrap();
        let src = SourcePlan::new(g.clone(), l.clone(), model);
        let dst = DestinationPlan {
            generic_base: g,
            location_base: l,
            model,
            params: FetchParams {
                window: 8,
                rto: 10,
                max_retries: 3,
                poll_retries: 3,
            },
        };
        (src, dst)
    }

    /// Lossless lockstep driver: every Interest is answered instantly, one
    /// time unit per exchange, with a workload step between exchanges.
    fn drive(
        src: &mut SourceAgent,
        dst: &mut DestinationAgent,
        workload: Option<&Workload>,
        seed: u64,
    ) -> Vec<(Micros, MigrationEvent)> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut events = Vec::new();
        let mut now = 0;
        let mut pending: Vec<Action> = src.start(now).unwrap();
        pending.extend(dst.start(now));
        while !(dst.is_done() || dst.is_failed()) {
            assert!(now < 100_000, "stuck");
            now += 1;
            if let Some(w) = workload {
                workload_step(src.image_mut(), w, &mut rng);
            }
            let batch = core::mem::take(&mut pending);
            if batch.is_empty() {
                pending.extend(dst.on_timer(now));
            }
            for a in batch {
                match a {
                    Action::SendInterest(i) => {
                        let (reply, acts) = src.on_interest(now, &i);
                        for a in acts {
                            if let Action::Event(e) = a {
                                events.push((now, e));
                            }
                        }
                        if let Some(o) = reply {
                            pending.extend(dst.on_object(now, &o));
                        }
                    }
                    Action::Event(e) => events.push((now, e)),
                    Action::Handover { .. } => {}
                }
            }
        }
        events
    }

    fn assert_equal(a: &Snapshot, b: &VmImage) {
        for loc in a.data.locators() {
            assert_eq!(a.read(&loc), b.read(&loc), "{loc}");
        }
        assert_eq!(a.data.locators(), b.data().locators());
    }

    #[test]
    fn idle_vm_migrates_in_one_round() {
        let c = config();
        let (sp, dp) = plans(HandoverModel::External);
        let mut src = SourceAgent::new(build_vm(&c, 1).unwrap(), sp);
        let mut dst = DestinationAgent::new(dp, ContentStore::new());
        let events = drive(&mut src, &mut dst, None, 0);
        assert!(dst.is_done());
        assert_eq!(src.session().rounds(), 1);
        assert_eq!(src.session().phase, MigrationPhase::Done);
        assert_equal(src.frozen_state().unwrap(), dst.image().unwrap());
        assert!(src.store().is_empty());
        let phases: Vec<_> = dst.history().iter().map(|v| v.phase.unwrap()).collect();
        assert_eq!(phases, vec![Phase::Push, Phase::StopAndCopy, Phase::Pull]);
        // stop-and-copy: config objects plus CPU state
        let sc = &dst.history()[1];
        assert_eq!(sc.entries, 2 + 2 * 2);
        assert!(events
            .iter()
            .any(|(_, e)| matches!(e, MigrationEvent::VmStarted { version: 1 })));
    }

    #[test]
    fn busy_vm_converges_strong_and_weak() {
        for naming in [NamingMode::Strong, NamingMode::Weak] {
            for seed in 0..4 {
                let c = config();
                let image = build_vm(&c, seed).unwrap();
                let hot: BTreeSet<_> = (0..4).map(Locator::page).collect();
                let (mut sp, dp) = plans(HandoverModel::SoftwareDefined);
                sp.push_naming = naming;
                sp.classifier.hot = hot.clone();
                sp.classifier.unclassified = (0..8).map(|b| Locator::block(0, b * 2)).collect();
                let w = Workload::new(&image, hot, 0.5, 0.3, 2);
                let mut src = SourceAgent::new(image, sp);
                let mut dst = DestinationAgent::new(dp, ContentStore::new());
                drive(&mut src, &mut dst, Some(&w), seed);
                assert!(dst.is_done(), "{naming:?} seed {seed}");
                assert_equal(src.frozen_state().unwrap(), dst.image().unwrap());
                assert!(src.store().is_empty());
            }
        }
    }

    #[test]
    fn release_requires_close() {
        let c = config();
        let (sp, _) = plans(HandoverModel::External);
        let mut src = SourceAgent::new(build_vm(&c, 1).unwrap(), sp);
        src.start(0).unwrap();
        assert_eq!(
            src.release_after_close(0),
            Err(MigrationError::CloseNotCompleted(0))
        );
        assert_eq!(
            src.release_after_close(3),
            Err(MigrationError::UnknownVersion(3))
        );
        let cp = Name::parse("/nyc/host7/vm-name/checkpoint/ver=0").unwrap();
        // close-ack before close does nothing
        let (r, _) = src.on_interest(1, &Interest::for_name(cp.child("close-ack")));
        assert!(r.is_none());
        assert_eq!(src.close_state(0), Some(CloseState::Open));
        let (r, _) = src.on_interest(2, &Interest::for_name(cp.child("close")));
        assert_eq!(&r.unwrap().payload[..], &[1]);
        assert_eq!(
            src.release_after_close(0),
            Err(MigrationError::CloseNotCompleted(0))
        );
        let (_, acts) = src.on_interest(3, &Interest::for_name(cp.child("close-ack")));
        assert!(acts.iter().any(|a| matches!(
            a,
            Action::Event(MigrationEvent::Released { version: 0, .. })
        )));
        assert_eq!(
            src.release_after_close(0),
            Err(MigrationError::AlreadyReleased(0))
        );
    }

    #[test]
    fn unpublished_version_is_unanswered() {
        let c = config();
        let (sp, _) = plans(HandoverModel::External);
        let mut src = SourceAgent::new(build_vm(&c, 1).unwrap(), sp);
        let poll = Interest::for_name(
            Name::parse("/nyc/host7/vm-name/checkpoint/ver=0/manifest").unwrap(),
        );
        assert!(src.on_interest(0, &poll).0.is_none());
        src.start(1).unwrap();
        assert!(src.on_interest(2, &poll).0.is_some());
        let later = Interest::for_name(
            Name::parse("/nyc/host7/vm-name/checkpoint/ver=1/manifest").unwrap(),
        );
        assert!(src.on_interest(2, &later).0.is_none());
    }

    #[test]
    fn frozen_source_rejects_writes_after_stop() {
        let c = config();
        let (sp, dp) = plans(HandoverModel::External);
        let mut src = SourceAgent::new(build_vm(&c, 1).unwrap(), sp);
        let mut dst = DestinationAgent::new(dp, ContentStore::new());
        drive(&mut src, &mut dst, None, 0);
        assert!(src.image().is_frozen());
        assert!(src
            .image_mut()
            .apply_write(Locator::page(0), vec![0u8; 4096])
            .is_err());
        let actions = src.rollback();
        assert_eq!(actions, vec![Action::Event(MigrationEvent::RolledBack)]);
        assert!(!src.image().is_frozen());
    }

    #[test]
    fn second_migration_reuses_destination_store() {
        let c = config();
        let (sp, dp) = plans(HandoverModel::External);
        let mut src = SourceAgent::new(build_vm(&c, 5).unwrap(), sp.clone());
        let mut dst = DestinationAgent::new(dp.clone(), ContentStore::new());
        drive(&mut src, &mut dst, None, 0);
        let first: u64 = dst.history().iter().map(|v| v.unique_fetched).sum();
        let (_, store) = dst.into_parts();
        let mut src = SourceAgent::new(build_vm(&c, 5).unwrap(), sp);
        let mut dst = DestinationAgent::new(dp, store);
        drive(&mut src, &mut dst, None, 0);
        let second: u64 = dst.history().iter().map(|v| v.unique_fetched).sum();
        assert!(first > 0);
        assert_eq!(second, 0);
    }
}
