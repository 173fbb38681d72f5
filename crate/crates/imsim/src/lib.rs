//! Deterministic discrete-event simulator of an IMS core network.
//!
//! The crate models the signaling plane of an IP Multimedia Subsystem:
//! CSCF nodes (proxy, interrogating, serving), the HSS/SLF subscriber
//! databases, application servers chained over the ISC interface, the
//! BGCF/MGCF/SGW/MGW breakout path into the circuit-switched domain,
//! MRFC/MRFP media resources, PDP/PEP policy control, and per-node
//! charging records. Everything runs on a single-threaded event loop
//! with integer ticks, so identical scenario files always produce
//! byte-identical traces and CDR logs.
//!
//! Scenarios are line-oriented text files (see [`scenario`]) executed by
//! [`runner::Runner`]; the `imsim` binary wraps that in a small CLI.

pub mod app_server;
pub mod charging;
pub mod cscf;
pub mod hss;
pub mod identity;
pub mod interworking;
pub mod media;
pub mod netsim;
pub mod policy;
pub mod runner;
pub mod scenario;
pub mod signaling;

pub use runner::{RunReport, Runner};
pub use scenario::Scenario;
