//! Metrics report: one JSON document per scenario run, plus a text view.

use std::fmt::Write as _;

use ccnx_migrate_core::manifest::{NamingCost, Phase};
use ccnx_migrate_core::migration::{StopPolicy, VersionMetrics};
use ccnx_migrate_core::routing::HandoverModel;
use ccnx_migrate_core::Micros;
use serde::{Deserialize, Serialize};

use crate::harness::Equivalence;
use crate::scenario::{NamingChoice, TransportSpec};
use crate::sim::{LogEntry, NetStats, ProbeRecord, RouteChange};

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub routing: HandoverModel,
    pub naming: NamingChoice,
    pub stop: StopPolicy,
    pub transport: TransportSpec,
    pub migrations: Vec<MigrationReport>,
    /// Counted per link crossing, including lost packets.
    pub network: NetStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<Vec<ProbeRecord>>,
    pub all_completed: bool,
    pub all_equivalent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MigrationReport {
    pub vm: String,
    pub source: String,
    pub destination: String,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_cause: Option<String>,
    pub started_at: Micros,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<Micros>,
    pub rounds: usize,
    /// Bytes dirtied during each push round.
    pub dirty_trace: Vec<u64>,
    pub guest_writes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen_at: Option<Micros>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vm_started_at: Option<Micros>,
    /// Virtual time between the source freezing and the destination
    /// starting the VM.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub downtime_us: Option<Micros>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub handover_at: Option<Micros>,
    pub phases: Vec<PhaseReport>,
    pub totals: PhaseReport,
    pub dedup: DedupReport,
    /// Objects left in the source store after the run.
    pub source_store_objects: usize,
    pub destination_store_objects: usize,
    pub equivalence: Equivalence,
    pub versions: Vec<VersionMetrics>,
    pub events: Vec<LogEntry>,
    pub route_changes: Vec<RouteChange>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub naming_comparison: Option<Vec<NamingCost>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Aborted,
}

/// Totals over the checkpoint versions of one phase, seen at the
/// destination.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PhaseReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    pub versions: u64,
    pub entries: u64,
    pub payload_bytes: u64,
    pub data_object_bytes: u64,
    pub manifest_bytes: u64,
    pub interests: u64,
    pub retransmissions: u64,
    pub objects_received: u64,
    pub duplicates: u64,
    /// Interest plus object bytes at the destination endpoint.
    pub wire_bytes: u64,
}

impl PhaseReport {
    pub fn add(&mut self, v: &VersionMetrics) {
        self.versions += 1;
        self.entries += v.entries;
        self.payload_bytes += v.payload_bytes_applied;
        self.data_object_bytes += v.data_object_bytes;
        self.manifest_bytes += v.manifest_bytes;
        self.interests += v.transport.interests_sent;
        self.retransmissions += v.transport.retransmissions;
        self.objects_received += v.transport.objects_received;
        self.duplicates += v.transport.duplicates;
        self.wire_bytes += v.transport.wire_bytes();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DedupReport {
    /// Manifest entries across all versions.
    pub logical_objects: u64,
    /// Objects fetched over the network (hash-named plus weak).
    pub unique_objects: u64,
    pub hash_fetched: u64,
    pub weak_fetched: u64,
    pub dedup_hits: u64,
    pub saved_bytes: u64,
}

impl MetricsReport {
    /// CLI exit status: 0 when every migration completed and matched the
    /// source, 3 when one aborted, 4 when one diverged.
    pub fn exit_code(&self) -> u8 {
        if !self.all_completed {
            3
        } else if !self.all_equivalent {
            4
        } else {
            0
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Renders a report JSON document as plain text.
pub fn render_text(report: &serde_json::Value) -> Result<String, String> {
    let get = |v: &serde_json::Value, k: &str| v.get(k).cloned().unwrap_or(serde_json::Value::Null);
    let migrations = report
        .get("migrations")
        .and_then(|m| m.as_array())
        .ok_or("report has no migrations array")?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario {} (seed {}), routing {}, naming {}",
        get(report, "scenario"),
        get(report, "seed"),
        get(report, "routing"),
        get(report, "naming"),
    );
    for m in migrations {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "vm {}: {} -> {}  outcome {}  equivalence {}",
            get(m, "vm"),
            get(m, "source"),
            get(m, "destination"),
            get(m, "outcome"),
            get(&get(m, "equivalence"), "verdict"),
        );
        if let Some(cause) = m.get("abort_cause") {
            let _ = writeln!(out, "  abort cause: {cause}");
        }
        let _ = writeln!(
            out,
            "  rounds {}  downtime_us {}  handover_at {}",
            get(m, "rounds"),
            get(m, "downtime_us"),
            get(m, "handover_at"),
        );
        let _ = writeln!(
            out,
            "  {:<14} {:>8} {:>12} {:>12} {:>10} {:>10} {:>12}",
            "phase", "entries", "payload", "manifest", "interests", "retx", "wire"
        );
        let phases = m
            .get("phases")
            .and_then(|p| p.as_array())
            .cloned()
            .unwrap_or_default();
        for p in phases.iter().chain(m.get("totals")) {
            let label = p.get("phase").and_then(|x| x.as_str()).unwrap_or("total");
            let n = |k: &str| p.get(k).and_then(|x| x.as_u64()).unwrap_or(0);
            let _ = writeln!(
                out,
                "  {:<14} {:>8} {:>12} {:>12} {:>10} {:>10} {:>12}",
                label,
                n("entries"),
                n("payload_bytes"),
                n("manifest_bytes"),
                n("interests"),
                n("retransmissions"),
                n("wire_bytes"),
            );
        }
        let d = get(m, "dedup");
        let _ = writeln!(
            out,
            "  dedup: logical {}  fetched {}  hits {}  saved_bytes {}",
            get(&d, "logical_objects"),
            get(&d, "unique_objects"),
            get(&d, "dedup_hits"),
            get(&d, "saved_bytes"),
        );
        if let Some(rows) = m.get("naming_comparison").and_then(|r| r.as_array()) {
            let _ = writeln!(out, "  naming comparison:");
            let _ = writeln!(
                out,
                "    {:<16} {:>8} {:>12} {:>12} {:>12}",
                "scheme", "objects", "payload", "total", "overhead"
            );
            for r in rows {
                let _ = writeln!(
                    out,
                    "    {:<16} {:>8} {:>12} {:>12} {:>12}",
                    r.get("scheme").and_then(|x| x.as_str()).unwrap_or("?"),
                    get(r, "objects"),
                    get(r, "payload_bytes"),
                    get(r, "total_bytes"),
                    get(r, "overhead_bytes"),
                );
            }
        }
    }
    let net = get(report, "network");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "network: wire_bytes {}  lost {}  no_route {}",
        get(&net, "wire_bytes"),
        get(&net, "lost"),
        get(&net, "no_route"),
    );
    Ok(out)
}

pub(crate) fn phase_reports(versions: &[VersionMetrics]) -> (Vec<PhaseReport>, PhaseReport) {
    let mut phases: Vec<PhaseReport> = Vec::new();
    let mut total = PhaseReport::default();
    for v in versions {
        total.add(v);
        match phases.iter_mut().find(|p| p.phase == v.phase) {
            Some(p) => p.add(v),
            None => {
                let mut p = PhaseReport {
                    phase: v.phase,
                    ..PhaseReport::default()
                };
                p.add(v);
                phases.push(p);
            }
        }
    }
    (phases, total)
}
