//! Runs scenarios end to end and checks the result against the source.

use std::collections::{BTreeMap, BTreeSet};

use ccnx_migrate_core::agent::{AbortReason, MigrationEvent};
use ccnx_migrate_core::machine::{
    build_vm_with, BuildOptions, Locator, ResourceKind, Snapshot, VmImage, Workload,
};
use ccnx_migrate_core::manifest::{compare_naming, NamingMode};
use ccnx_migrate_core::migration::{
    DestinationAgent, DestinationPlan, ResourceClassifier, SourceAgent, SourcePlan,
};
use ccnx_migrate_core::store::{CheckpointId, ContentStore};
use ccnx_migrate_core::transport::{FetchParams, TransportMetrics};
use ccnx_migrate_core::{ContentObject, Micros, Name, NamedAddress};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::report::{phase_reports, DedupReport, MetricsReport, MigrationReport, Outcome};
use crate::scenario::{NamingChoice, Scenario, ScenarioError, TopologySpec};
use crate::sim::{
    App, DestinationApp, FetcherApp, NetStats, ProbeApp, SimError, Simulator, SourceApp, StoreApp,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Setup(String),
}

/// First difference between two VM states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub kind: &'static str,
    pub locator: Locator,
    /// First differing byte; `None` when the resource is missing on one side.
    pub offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Equivalence {
    Pass,
    Fail {
        divergence: Divergence,
    },
    /// The migration did not finish, so there is nothing to compare.
    NotRun,
}

impl Equivalence {
    pub fn is_pass(&self) -> bool {
        matches!(self, Equivalence::Pass)
    }
}

/// Byte-compares every resource of the frozen source state with the
/// destination image.
pub fn verify_equivalence(frozen: &Snapshot, destination: &VmImage) -> Equivalence {
    let mut locators: BTreeSet<Locator> = frozen.data.locators().into_iter().collect();
    locators.extend(destination.data().locators());
    for loc in locators {
        let offset = match (frozen.read(&loc), destination.read(&loc)) {
            (Some(a), Some(b)) if a == b => continue,
            (Some(a), Some(b)) => Some(
                a.iter()
                    .zip(b.iter())
                    .position(|(x, y)| x != y)
                    .unwrap_or(a.len().min(b.len())),
            ),
            _ => None,
        };
        return Equivalence::Fail {
            divergence: Divergence {
                kind: loc.kind.label(),
                locator: loc,
                offset,
            },
        };
    }
    Equivalence::Pass
}

/// Final state of one migration, for checks beyond the report.
#[derive(Debug, Clone)]
pub struct MigrationArtifacts {
    pub frozen: Option<Snapshot>,
    pub destination: Option<VmImage>,
    pub source_store: ContentStore,
}

#[derive(Debug)]
pub struct Run {
    pub report: MetricsReport,
    pub migrations: Vec<MigrationArtifacts>,
    /// Destination host stores by node name, after all migrations.
    pub stores: BTreeMap<String, ContentStore>,
}

/// Builds the VM images a scenario describes.
pub fn build_images(s: &Scenario) -> Result<Vec<VmImage>, HarnessError> {
    s.vms
        .iter()
        .enumerate()
        .map(|(i, vm)| {
            let opts = BuildOptions {
                dup_fraction: vm.dup_fraction,
            };
            build_vm_with(&vm.config, s.vm_seed(i), &opts).map_err(|source| {
                ScenarioError::Config {
                    vm: vm.config.vm_name.to_string(),
                    source,
                }
                .into()
            })
        })
        .collect()
}

pub fn run_scenario(s: &Scenario) -> Result<Run, HarnessError> {
    s.validate()?;
    let images = build_images(s)?;
    run_with_images(s, images)
}

/// Runs `s` with caller-supplied images in place of the generated ones.
pub fn run_with_images(s: &Scenario, images: Vec<VmImage>) -> Result<Run, HarnessError> {
    if images.len() != s.vms.len() {
        return Err(HarnessError::Setup(format!(
            "{} images for {} VMs",
            images.len(),
            s.vms.len()
        )));
    }
    let mut sim = Simulator::new(&s.topology, s.seed, s.routing)?;
    let node = |sim: &Simulator, name: &str| {
        sim.node_id(name)
            .ok_or_else(|| HarnessError::Setup(format!("unknown node {name}")))
    };

    let mut overrides: Vec<BTreeMap<ResourceKind, Name>> = vec![BTreeMap::new(); s.vms.len()];
    if let Some(os) = &s.objectstore {
        let at = node(&sim, &os.node)?;
        let owner = CheckpointId::new(os.prefix.clone(), 0);
        let mut store = ContentStore::new();
        for (i, image) in images.iter().enumerate() {
            for (d, disk) in image.config().disks.iter().enumerate() {
                if !os.disks.contains(&disk.disk_name) {
                    continue;
                }
                overrides[i].insert(
                    ResourceKind::DiskBlock { disk: d as u16 },
                    os.prefix.clone(),
                );
                for bytes in image.data().disks[d].blocks.values() {
                    store
                        .put(ContentObject::nameless(bytes.clone()), &owner)
                        .map_err(|e| HarnessError::Setup(e.to_string()))?;
                }
            }
        }
        let app = sim.add_app(at, App::Store(StoreApp { store, served: 0 }));
        sim.route_prefix(&os.prefix, at);
        sim.register_local(at, os.prefix.clone(), app);
    }

    let mut stores: BTreeMap<String, ContentStore> = BTreeMap::new();
    let mut migrations = Vec::new();
    let mut artifacts = Vec::new();
    let mut probe_app = None;

    for (i, (vm, image)) in s.vms.iter().zip(images).enumerate() {
        let src = node(&sim, &vm.source)?;
        let dst = node(&sim, &vm.destination)?;
        let one_way = sim.distance(dst, src).ok_or_else(|| {
            HarnessError::Sim(SimError::Unreachable(
                vm.source.clone(),
                vm.destination.clone(),
            ))
        })?;
        let generic = image.config().vm_name.clone();
        let location = vm.location_prefix.join(&generic);
        let seed = s.vm_seed(i);

        let hot: BTreeSet<Locator> = (0..vm.workload.hot_pages).map(Locator::page).collect();
        let mut blocks: Vec<Locator> = image
            .data()
            .locators()
            .into_iter()
            .filter(|l| matches!(l.kind, ResourceKind::DiskBlock { .. }))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7075_6c6c);
        blocks.shuffle(&mut rng);
        let n_pull = (vm.pull_fraction * blocks.len() as f64).round() as usize;
        let unclassified: BTreeSet<Locator> = blocks.into_iter().take(n_pull).collect();
        let workload = Workload::new(
            &image,
            hot.clone(),
            vm.workload.hot_write_prob,
            vm.workload.cold_write_prob,
            vm.workload.writes_per_step,
        );

        let mut plan = SourcePlan::new(generic.clone(), location.clone(), s.routing);
        plan.source = src;
        plan.destination = dst;
        plan.push_naming = match s.naming {
            NamingChoice::Weak => NamingMode::Weak,
            NamingChoice::Strong | NamingChoice::Comparison => NamingMode::Strong,
        };
        plan.classifier = ResourceClassifier { hot, unclassified };
        plan.stop = s.stop;
        plan.chunk_limit = s.chunk_limit;
        plan.prefix_overrides = std::mem::take(&mut overrides[i]);

        let naming_comparison = if s.naming == NamingChoice::Comparison {
            let mut copy = image.clone();
            let snap = copy
                .snapshot(0)
                .map_err(|e| HarnessError::Setup(e.to_string()))?;
            let selection: BTreeSet<Locator> = snap
                .data
                .locators()
                .into_iter()
                .filter(|l| plan.classifier.is_pushable(l))
                .collect();
            Some(
                compare_naming(
                    &snap,
                    &selection,
                    plan.base_for(ccnx_migrate_core::manifest::Phase::Push),
                )
                .map_err(|e| HarnessError::Setup(e.to_string()))?,
            )
        } else {
            None
        };

        let agent = SourceAgent::new(image, plan);
        let src_app = sim.add_app(
            src,
            App::Source(SourceApp {
                agent,
                workload,
                rng: ChaCha8Rng::seed_from_u64(seed ^ 0x776f_726b),
                interval: vm.workload.interval_us,
                node: src,
                writes: 0,
            }),
        );
        sim.route_prefix(&location, src);
        sim.register_local(src, location.clone(), src_app);
        sim.register_local(src, generic.clone(), src_app);
        sim.assign_generic(&generic, src);

        let params = FetchParams {
            window: s.transport.window,
            rto: s
                .transport
                .rto_us
                .unwrap_or(FetchParams::for_latency(one_way).rto),
            max_retries: s.transport.max_retries,
            poll_retries: s.transport.poll_retries,
        };
        let dplan = DestinationPlan {
            generic_base: generic.clone(),
            location_base: location.clone(),
            model: s.routing,
            params,
        };
        let store = stores.remove(&vm.destination).unwrap_or_default();
        let dest = DestinationAgent::new(dplan, store);
        let dst_app = sim.add_app(
            dst,
            App::Destination(DestinationApp::new(
                dest,
                generic.clone(),
                dst,
                Some(src_app),
            )),
        );
        sim.register_local(dst, generic.clone(), dst_app);

        let started_at = sim.now();
        if let Some(p) = &s.probe {
            if p.vm == i {
                let at = node(&sim, &p.node)?;
                let app = sim.add_app(
                    at,
                    App::Probe(ProbeApp::new(generic.clone(), p.interval_us, p.count)),
                );
                sim.schedule_tick(app, started_at + p.start_us);
                probe_app = Some(app);
            }
        }
        sim.start_app(src_app);
        sim.start_app(dst_app);
        sim.run_until(s.time_limit_us, |sim| match sim.app(dst_app) {
            App::Destination(d) => d
                .agent
                .as_ref()
                .is_none_or(|a| a.is_done() || a.is_failed()),
            _ => true,
        })?;
        let finished_at = sim.now();

        let App::Destination(d) = sim.app_mut(dst_app) else {
            unreachable!("destination app");
        };
        let agent = d.agent.take().expect("agent present until the run ends");
        let completed = agent.is_done();
        let versions = agent.history().to_vec();
        let (dest_image, dest_store) = agent.into_parts();
        let App::Source(sa) = sim.app(src_app) else {
            unreachable!("source app");
        };
        let frozen = sa.agent.frozen_state().cloned();
        let equivalence = match (&frozen, &dest_image, completed) {
            (Some(f), Some(img), true) => verify_equivalence(f, img),
            _ => Equivalence::NotRun,
        };
        let session = sa.agent.session();
        let source_store = sa.agent.store().clone();
        let guest_writes = sa.writes;
        let rounds = session.rounds();
        let dirty_trace = session.dirty_trace();

        let events: Vec<_> = sim
            .log()
            .iter()
            .filter(|e| e.app == src_app || e.app == dst_app)
            .cloned()
            .collect();
        let event_at = |pred: &dyn Fn(&MigrationEvent) -> bool| {
            events.iter().find(|e| pred(&e.event)).map(|e| e.at)
        };
        let frozen_at = event_at(&|e| matches!(e, MigrationEvent::Frozen { .. }));
        let vm_started_at = event_at(&|e| matches!(e, MigrationEvent::VmStarted { .. }));
        let abort_cause = events.iter().find_map(|e| match &e.event {
            MigrationEvent::Aborted { version, reason } => Some(describe_abort(*version, reason)),
            _ => None,
        });
        let handover_at = sim
            .handovers()
            .iter()
            .find(|(_, p, _)| *p == generic)
            .map(|(t, _, _)| *t);
        let generic_text = generic.to_string();
        let route_changes = sim
            .route_changes()
            .iter()
            .filter(|r| r.at >= started_at && r.prefix == generic_text)
            .cloned()
            .collect();

        let (phases, totals) = phase_reports(&versions);
        let mut dedup = DedupReport::default();
        for v in &versions {
            dedup.logical_objects += v.entries;
            dedup.hash_fetched += v.unique_fetched;
            dedup.weak_fetched += v.weak_fetched;
            dedup.dedup_hits += v.dedup_hits;
            dedup.saved_bytes += v.dedup_saved_bytes;
        }
        dedup.unique_objects = dedup.hash_fetched + dedup.weak_fetched;

        migrations.push(MigrationReport {
            vm: generic_text,
            source: vm.source.clone(),
            destination: vm.destination.clone(),
            outcome: if completed {
                Outcome::Completed
            } else {
                Outcome::Aborted
            },
            abort_cause,
            started_at,
            finished_at: completed.then_some(finished_at),
            rounds,
            dirty_trace,
            guest_writes,
            frozen_at,
            vm_started_at,
            downtime_us: frozen_at.zip(vm_started_at).map(|(f, s)| s - f),
            handover_at,
            phases,
            totals,
            dedup,
            source_store_objects: source_store.len(),
            destination_store_objects: dest_store.len(),
            equivalence,
            versions,
            events,
            route_changes,
            naming_comparison,
        });
        artifacts.push(MigrationArtifacts {
            frozen,
            destination: dest_image,
            source_store,
        });
        stores.insert(vm.destination.clone(), dest_store);
    }

    sim.drain(s.time_limit_us)?;
    let probe = probe_app.map(|id| match sim.app(id) {
        App::Probe(p) => p.records.clone(),
        _ => Vec::new(),
    });
    let all_completed = migrations.iter().all(|m| m.outcome == Outcome::Completed);
    let all_equivalent = migrations.iter().all(|m| m.equivalence.is_pass());
    let report = MetricsReport {
        scenario: s.name.clone(),
        seed: s.seed,
        routing: s.routing,
        naming: s.naming,
        stop: s.stop,
        transport: s.transport,
        migrations,
        network: *sim.stats(),
        probe,
        all_completed,
        all_equivalent,
    };
    Ok(Run {
        report,
        migrations: artifacts,
        stores,
    })
}

fn describe_abort(version: u64, reason: &AbortReason) -> String {
    match reason {
        AbortReason::Transport { missing } => {
            let first = missing
                .first()
                .and_then(|a| a.name.as_ref())
                .map(|n| n.to_string())
                .unwrap_or_default();
            format!(
                "version {version}: {} request(s) unanswered, first {first}",
                missing.len()
            )
        }
        AbortReason::BadManifest { detail } => format!("version {version}: bad manifest: {detail}"),
        AbortReason::Apply { detail } => format!("version {version}: apply failed: {detail}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FetchReport {
    pub requested: usize,
    pub delivered: usize,
    pub duplicate_deliveries: usize,
    pub completed: bool,
    pub finished_at: Option<Micros>,
    pub transport: TransportMetrics,
    pub network: NetStats,
}

/// Fetches `objects` by hash from a store on `server` to a client on
/// `client` over `topology`.
#[allow(clippy::too_many_arguments)]
pub fn fetch_all(
    topology: &TopologySpec,
    seed: u64,
    client: &str,
    server: &str,
    prefix: &Name,
    objects: &[ContentObject],
    params: FetchParams,
    time_limit: Micros,
) -> Result<FetchReport, HarnessError> {
    let mut sim = Simulator::new(topology, seed, Default::default())?;
    let c = sim
        .node_id(client)
        .ok_or_else(|| SimError::UnknownNode(client.into()))?;
    let srv = sim
        .node_id(server)
        .ok_or_else(|| SimError::UnknownNode(server.into()))?;
    let owner = CheckpointId::new(prefix.clone(), 0);
    let mut store = ContentStore::new();
    let mut addresses = Vec::new();
    for obj in objects {
        let hash = store
            .put(obj.clone(), &owner)
            .map_err(|e| HarnessError::Setup(e.to_string()))?;
        addresses.push(NamedAddress::hashed(prefix.clone(), hash));
    }
    addresses.dedup();
    let requested = addresses.len();
    let st = sim.add_app(srv, App::Store(StoreApp { store, served: 0 }));
    sim.route_prefix(prefix, srv);
    sim.register_local(srv, prefix.clone(), st);
    let f = sim.add_app(c, App::Fetcher(FetcherApp::new(params, addresses)));
    sim.start_app(f);
    sim.run_until(time_limit, |sim| match sim.app(f) {
        App::Fetcher(x) => x.is_finished(),
        _ => true,
    })?;
    let App::Fetcher(x) = sim.app(f) else {
        unreachable!("fetcher app");
    };
    let unique: BTreeSet<_> = x.delivered.iter().collect();
    Ok(FetchReport {
        requested,
        delivered: x.delivered.len(),
        duplicate_deliveries: x.delivered.len() - unique.len(),
        completed: x.finished_at.is_some(),
        finished_at: x.finished_at,
        transport: *x.session.metrics(),
        network: *sim.stats(),
    })
}
