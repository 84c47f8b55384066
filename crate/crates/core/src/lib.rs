//! Core building blocks for middleware-level QoS management of IoT traffic.
//!
//! Requests entering the pipeline are classified and stamped with a
//! `TOS_HTTP` priority ([`cmc`]), differentiated by rejection, delaying and
//! scheduling ([`pep`]), and the differentiation policy is steered by an
//! RTT-driven state machine ([`autonomic`]). [`cluster`] holds the load
//! balancing strategies, [`emulator`] the arrival processes used to inject
//! traffic, and [`metrics`] the per-request dataset and its summary.
//!
//! Everything here is free of I/O beyond file parsing; the HTTP services live
//! in the `qosmw-node` crate.

pub mod autonomic;
pub mod cluster;
pub mod cmc;
pub mod emulator;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pep;
pub mod scenario;

pub use error::{Error, Result};
pub use model::{PerPriority, PriorityLevel, TaggedRequest, TOS_HTTP};
