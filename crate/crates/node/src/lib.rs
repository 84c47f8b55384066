//! Networked components of the QoS pipeline.
//!
//! Each component is an HTTP service that can run standalone or be wired
//! together in one process by [`runner`]:
//!
//! ```text
//! injectors ─▶ CMC ─▶ PEP ─▶ (balancer) ─▶ gateway(s)
//!                      ▲
//!        metrics ─▶ autonomic manager
//! ```

pub mod autonomic;
pub mod balancer;
pub mod clock;
pub mod cmc;
pub mod emulator;
pub mod gateway;
pub mod metrics;
pub mod pep;
pub mod proxy;
pub mod runner;
pub mod server;

pub use server::ServerHandle;
