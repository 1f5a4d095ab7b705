//! Scenario documents: topology, VMs to migrate, and run parameters.

use std::collections::BTreeSet;
use std::path::Path;

use ccnx_migrate_core::machine::{ConfigError, VmConfig};
use ccnx_migrate_core::manifest::DEFAULT_CHUNK_LIMIT;
use ccnx_migrate_core::migration::StopPolicy;
use ccnx_migrate_core::routing::HandoverModel;
use ccnx_migrate_core::{Micros, Name};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("vm {vm}: {source}")]
    Config { vm: String, source: ConfigError },
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamingChoice {
    #[default]
    Strong,
    Weak,
    /// Strong migration plus a naming-overhead table for checkpoint 0.
    Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub topology: TopologySpec,
    #[serde(default)]
    pub routing: HandoverModel,
    #[serde(default)]
    pub naming: NamingChoice,
    #[serde(default)]
    pub stop: StopPolicy,
    #[serde(default)]
    pub transport: TransportSpec,
    #[serde(default = "default_chunk_limit")]
    pub chunk_limit: usize,
    /// Migrated one after another; later VMs find the objects of earlier
    /// ones in the destination store.
    pub vms: Vec<VmSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectstore: Option<ObjectStoreSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSpec>,
    #[serde(default = "default_time_limit")]
    pub time_limit_us: Micros,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_chunk_limit() -> usize {
    DEFAULT_CHUNK_LIMIT
}

fn default_time_limit() -> Micros {
    3_600_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    /// Location-dependent prefixes owned by this node, e.g. `/nyc/host7`.
    #[serde(default)]
    pub prefixes: Vec<Name>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub latency_us: Micros,
    #[serde(default)]
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportSpec {
    #[serde(default = "default_window")]
    pub window: usize,
    /// Defaults to four times the one-way source-destination latency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rto_us: Option<Micros>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_poll_retries")]
    pub poll_retries: u32,
}

fn default_window() -> usize {
    16
}
fn default_retries() -> u32 {
    3
}
fn default_poll_retries() -> u32 {
    50
}

impl Default for TransportSpec {
    fn default() -> Self {
        TransportSpec {
            window: default_window(),
            rto_us: None,
            max_retries: default_retries(),
            poll_retries: default_poll_retries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmSpec {
    pub config: VmConfig,
    /// Image seed; defaults to the scenario seed plus the VM's position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub source: String,
    pub destination: String,
    /// Prefix of the source host; the VM's location name is this prefix
    /// followed by the VM name.
    pub location_prefix: Name,
    #[serde(default)]
    pub workload: WorkloadSpec,
    /// Fraction of populated disk blocks left unclassified and moved by
    /// the pull phase.
    #[serde(default)]
    pub pull_fraction: f64,
    /// Fraction of populated disk blocks that duplicate another block.
    #[serde(default)]
    pub dup_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// RAM pages `0..hot_pages` form the hot set.
    #[serde(default)]
    pub hot_pages: u64,
    #[serde(default)]
    pub hot_write_prob: f64,
    #[serde(default)]
    pub cold_write_prob: f64,
    #[serde(default)]
    pub writes_per_step: u32,
    #[serde(default = "default_interval")]
    pub interval_us: Micros,
}

fn default_interval() -> Micros {
    1_000
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            hot_pages: 0,
            hot_write_prob: 0.0,
            cold_write_prob: 0.0,
            writes_per_step: 0,
            interval_us: default_interval(),
        }
    }
}

/// A node holding the blocks of shared read-only disks, fetched by hash
/// under its own prefix instead of from the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectStoreSpec {
    pub node: String,
    pub prefix: Name,
    pub disks: Vec<String>,
}

/// Periodic Interests for `<generic name>/probe/<n>` recording which node
/// answers each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub node: String,
    #[serde(default)]
    pub vm: usize,
    #[serde(default)]
    pub start_us: Micros,
    pub interval_us: Micros,
    pub count: u64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.topology.nodes.iter().position(|n| n.name == name)
    }

    pub fn vm_seed(&self, index: usize) -> u64 {
        self.vms[index]
            .seed
            .unwrap_or_else(|| self.seed.wrapping_add(index as u64))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut names = BTreeSet::new();
        for n in &self.topology.nodes {
            if !names.insert(n.name.as_str()) {
                return Err(invalid(format!("duplicate node {}", n.name)));
            }
        }
        if self.topology.nodes.is_empty() {
            return Err(invalid("topology has no nodes"));
        }
        for l in &self.topology.links {
            for end in [&l.a, &l.b] {
                if !names.contains(end.as_str()) {
                    return Err(invalid(format!("link endpoint {end} is not a node")));
                }
            }
            if l.a == l.b {
                return Err(invalid(format!("link {} loops to itself", l.a)));
            }
            if !(0.0..1.0).contains(&l.loss) {
                return Err(invalid(format!(
                    "link {}-{}: loss must lie in [0, 1)",
                    l.a, l.b
                )));
            }
        }
        if self.transport.window == 0 {
            return Err(invalid("transport window must be positive"));
        }
        if self.vms.is_empty() {
            return Err(invalid("scenario has no VMs"));
        }
        if self.stop.alpha.is_nan() || self.stop.alpha < 0.0 || self.stop.max_rounds == 0 {
            return Err(invalid("stop policy needs alpha >= 0 and max_rounds >= 1"));
        }
        let mut vm_names = BTreeSet::new();
        for vm in &self.vms {
            let label = vm.config.vm_name.to_string();
            vm.config
                .validate_for_transfer()
                .map_err(|source| ScenarioError::Config {
                    vm: label.clone(),
                    source,
                })?;
            if !vm_names.insert(label.clone()) {
                return Err(invalid(format!("duplicate VM name {label}")));
            }
            for end in [&vm.source, &vm.destination] {
                if !names.contains(end.as_str()) {
                    return Err(invalid(format!("vm {label}: node {end} does not exist")));
                }
            }
            if vm.source == vm.destination {
                return Err(invalid(format!(
                    "vm {label}: source and destination are the same node"
                )));
            }
            if vm.location_prefix.is_empty() {
                return Err(invalid(format!(
                    "vm {label}: location prefix must not be empty"
                )));
            }
            for (what, f) in [
                ("pull_fraction", vm.pull_fraction),
                ("dup_fraction", vm.dup_fraction),
            ] {
                if !(0.0..=1.0).contains(&f) {
                    return Err(invalid(format!("vm {label}: {what} must lie in [0, 1]")));
                }
            }
            let w = &vm.workload;
            for p in [w.hot_write_prob, w.cold_write_prob] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!(
                        "vm {label}: write probabilities must lie in [0, 1]"
                    )));
                }
            }
            if w.interval_us == 0 {
                return Err(invalid(format!(
                    "vm {label}: workload interval must be positive"
                )));
            }
            if w.hot_pages > vm.config.ram_pages() {
                return Err(invalid(format!(
                    "vm {label}: more hot pages than RAM pages"
                )));
            }
        }
        if let Some(os) = &self.objectstore {
            if !names.contains(os.node.as_str()) {
                return Err(invalid(format!(
                    "objectstore node {} does not exist",
                    os.node
                )));
            }
            for d in &os.disks {
                let found: Vec<_> = self
                    .vms
                    .iter()
                    .filter_map(|vm| vm.config.disks.iter().find(|x| &x.disk_name == d))
                    .collect();
                if found.is_empty() {
                    return Err(invalid(format!("objectstore disk {d} belongs to no VM")));
                }
                if found.iter().any(|x| !x.read_only) {
                    return Err(invalid(format!("objectstore disk {d} must be read-only")));
                }
            }
        }
        if let Some(p) = &self.probe {
            if !names.contains(p.node.as_str()) {
                return Err(invalid(format!("probe node {} does not exist", p.node)));
            }
            if p.vm >= self.vms.len() {
                return Err(invalid("probe refers to a VM that does not exist"));
            }
            if p.interval_us == 0 {
                return Err(invalid("probe interval must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "topology": {
            "nodes": [{"name": "s", "prefixes": ["/nyc/host7"]}, {"name": "d"}],
            "links": [{"a": "s", "b": "d", "latency_us": 100}]
        },
        "vms": [{
            "config": {
                "vm_name": "/vm-name", "cpu_n": 1, "ram_bytes": 8192, "page_size": 4096,
                "disks": [], "net_interfaces": []
            },
            "source": "s", "destination": "d", "location_prefix": "/nyc/host7"
        }]
    }"#;

    #[test]
    fn minimal_scenario_gets_defaults() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.routing, HandoverModel::External);
        assert_eq!(s.naming, NamingChoice::Strong);
        assert_eq!(s.stop, StopPolicy::default());
        assert_eq!(s.transport.max_retries, 3);
        assert_eq!(s.vm_seed(0), 0);
    }

    #[test]
    fn rejects_dangling_link() {
        let text = MINIMAL.replace(r#""b": "d""#, r#""b": "x""#);
        assert!(matches!(
            Scenario::from_json(&text),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn rejects_same_source_and_destination() {
        let text = MINIMAL.replace(r#""destination": "d""#, r#""destination": "s""#);
        assert!(matches!(
            Scenario::from_json(&text),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn rejects_bad_vm_config() {
        let text = MINIMAL.replace(r#""ram_bytes": 8192"#, r#""ram_bytes": 8000"#);
        assert!(matches!(
            Scenario::from_json(&text),
            Err(ScenarioError::Config { .. })
        ));
    }
}
