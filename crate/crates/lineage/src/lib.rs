//! Std services around `lineage-core`: the lineage store and proof server,
//! their HTTP surfaces and clients, the FedRAMP scenario harness, and the
//! file formats the CLI reads and writes.

pub mod capsule;
pub mod client;
pub mod config;
pub mod harness;
pub mod keyfile;
pub mod proof_server;
pub mod service;
pub mod source;
pub mod store;
pub mod trust;
