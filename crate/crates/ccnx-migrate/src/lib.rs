//! Discrete-event simulation, scenario harness, and reports for VM
//! migration over CCNx. The protocol itself lives in `ccnx-migrate-core`.

pub mod harness;
pub mod report;
pub mod scenario;
pub mod sim;
