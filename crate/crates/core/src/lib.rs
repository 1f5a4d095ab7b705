//! Core of a VM migration system built on Content Centric Networking.
//!
//! Everything in this crate is `no_std` + `alloc`: the wire format, the
//! de-duplicating content store, the machine model, checkpoint manifests,
//! name-based forwarding tables, and the migration agents themselves. The
//! agents are sans-IO state machines: they consume Interests, Content
//! Objects, and timer expiries, and emit [`agent::Action`]s that a driver
//! (the simulator in the `ccnx-migrate` crate) executes.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agent;
pub mod hash;
pub mod machine;
pub mod manifest;
pub mod migration;
pub mod name;
pub mod routing;
pub mod store;
pub mod tlv;
pub mod transport;
pub mod wire;

pub use hash::Hash256;
pub use name::Name;
pub use wire::{ContentObject, Interest, NamedAddress};

/// Virtual time in microseconds.
pub type Micros = u64;
