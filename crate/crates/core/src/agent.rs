//! Outputs of the sans-IO migration agents.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::manifest::Phase;
use crate::name::Name;
use crate::wire::{Interest, NamedAddress};

/// Something the driver must do on an agent's behalf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    SendInterest(Interest),
    Event(MigrationEvent),
    /// Move the generic name to the node running this agent: a controller
    /// repoint in the software-defined model, an advertise/withdraw pair
    /// in the distributed model.
    Handover {
        prefix: Name,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MigrationEvent {
    Published {
        version: u64,
        phase: Phase,
        entries: usize,
        payload_bytes: u64,
        manifest_bytes: u64,
        chunks: u32,
    },
    Frozen {
        version: u64,
    },
    Released {
        version: u64,
        evicted: usize,
    },
    RolledBack,
    ManifestReceived {
        version: u64,
        phase: Phase,
    },
    VersionClosed {
        version: u64,
        phase: Phase,
    },
    VmStarted {
        version: u64,
    },
    Completed,
    Aborted {
        version: u64,
        reason: AbortReason,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum AbortReason {
    /// A request ran out of retries.
    Transport { missing: Vec<NamedAddress> },
    /// A manifest could not be parsed or broke version or phase order.
    BadManifest { detail: alloc::string::String },
    /// An entry could not be applied to the destination image.
    Apply { detail: alloc::string::String },
}
