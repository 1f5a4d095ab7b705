//! Name-based forwarding and the routing side of a migration handover.

use alloc::collections::{BTreeMap, BTreeSet};
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::name::Name;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Where a FIB entry forwards: to an application on this node, or over the
/// link to a neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Face {
    Local,
    Neighbor(NodeId),
}

/// Longest-prefix-match forwarding table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FibTable {
    entries: BTreeMap<Name, Face>,
}

impl FibTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs or replaces the route for `prefix`; returns the old face.
    pub fn insert(&mut self, prefix: Name, face: Face) -> Option<Face> {
        self.entries.insert(prefix, face)
    }

    pub fn remove(&mut self, prefix: &Name) -> Option<Face> {
        self.entries.remove(prefix)
    }

    pub fn get(&self, prefix: &Name) -> Option<Face> {
        self.entries.get(prefix).copied()
    }

    pub fn lookup(&self, name: &Name) -> Option<Face> {
        self.lookup_entry(name).map(|(_, f)| f)
    }

    pub fn lookup_entry(&self, name: &Name) -> Option<(&Name, Face)> {
        (0..=name.len())
            .rev()
            .find_map(|len| self.entries.get_key_value(&name.prefix(len)))
            .map(|(n, f)| (n, *f))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Name, Face)> {
        self.entries.iter().map(|(n, f)| (n, *f))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoverModel {
    /// Location-dependent names only; the orchestrator hands out the
    /// source's location name and the generic name is never routed.
    #[default]
    External,
    /// A controller atomically repoints the generic name.
    SoftwareDefined,
    /// Endpoints advertise and withdraw the generic name themselves.
    Distributed,
}

impl HandoverModel {
    pub fn uses_generic_name(&self) -> bool {
        !matches!(self, HandoverModel::External)
    }
}

/// Origins currently advertising each prefix, as seen by one node.
///
/// When several nodes advertise the same prefix the lowest node id is
/// preferred until it withdraws.
#[derive(Debug, Clone, Default)]
pub struct AdvertisementTable {
    origins: BTreeMap<Name, BTreeSet<NodeId>>,
}

impl AdvertisementTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advertise(&mut self, prefix: Name, origin: NodeId) -> bool {
        self.origins.entry(prefix).or_default().insert(origin)
    }

    pub fn withdraw(&mut self, prefix: &Name, origin: NodeId) -> bool {
        let Some(set) = self.origins.get_mut(prefix) else {
            return false;
        };
        let removed = set.remove(&origin);
        if set.is_empty() {
            self.origins.remove(prefix);
        }
        removed
    }

    pub fn preferred(&self, prefix: &Name) -> Option<NodeId> {
        self.origins.get(prefix)?.first().copied()
    }

    pub fn prefixes(&self) -> impl Iterator<Item = &Name> {
        self.origins.keys()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error("controller has no route for {0}")]
    UnknownPrefix(Name),
}

/// Central controller of the software-defined model. It owns the
/// authoritative prefix → node assignment; the driver rewrites every FIB
/// from it in one event.
#[derive(Debug, Clone, Default)]
pub struct SdnController {
    routes: BTreeMap<Name, NodeId>,
}

impl SdnController {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(&mut self, prefix: Name, node: NodeId) {
        self.routes.insert(prefix, node);
    }

    pub fn target(&self, prefix: &Name) -> Option<NodeId> {
        self.routes.get(prefix).copied()
    }

    /// Points `prefix` at `node`; returns the previous target.
    pub fn repoint(&mut self, prefix: &Name, node: NodeId) -> Result<NodeId, RoutingError> {
        let slot = self
            .routes
            .get_mut(prefix)
            .ok_or_else(|| RoutingError::UnknownPrefix(prefix.clone()))?;
        Ok(core::mem::replace(slot, node))
    }

    pub fn routes(&self) -> impl Iterator<Item = (&Name, NodeId)> {
        self.routes.iter().map(|(n, id)| (n, *id))
    }
}
