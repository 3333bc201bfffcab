//! Test infrastructure for IoT device integration built around digital twins.
//!
//! The crate covers the full loop needed to test an IoT application without
//! physical devices or live third-party services:
//!
//! - [`model`] — a small declarative language for describing a device:
//!   typed properties, constraints, and an executable state machine.
//! - [`mbdt`] — model-based twins: validate property values against the
//!   model, attach the state machine, and execute requests in virtual time.
//! - [`mldt`] — ML twins: turn request/response traces into a feature
//!   matrix and train a small feed-forward classifier served as a twin.
//! - [`server`] — a REST server hosting fleets of twins with API-key auth
//!   and per-twin snapshot persistence.
//! - [`stub`] — stub servers simulating third-party applications over a
//!   synthetic data store.
//! - [`refdev`] — a hand-coded reference emulator of the dispenser used as
//!   ground truth, with seeded divergence injection.
//! - [`harness`] — schema-driven request generation and campaign execution
//!   against several targets in parallel.
//! - [`fidelity`] — response encoding, cosine similarity, exact Wilcoxon
//!   signed-rank, Cliff's delta, and the scalability/time-cost experiments.
//!
//! Everything runs in virtual time: requests carry a `virtual_now`
//! timestamp and scheduled device behavior (dose dispensing, grace
//! windows) is driven by explicit `tick` requests, so campaigns are fully
//! deterministic under a fixed seed.

pub mod cli;
pub mod fidelity;
pub mod harness;
pub mod mbdt;
pub mod mldt;
pub mod model;
pub mod refdev;
pub mod server;
pub mod stub;
pub mod time;
pub mod wire;
