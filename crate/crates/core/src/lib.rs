//! Blockchain-backed asynchronous federated learning with a dynamic scaling
//! factor.
//!
//! The crate has two halves. The protocol half is a set of pure functions:
//! accuracy-weighted asynchronous aggregation ([`aggregation`]), a hash-chained
//! ledger of model digests with committee leader election ([`chain`]) and the
//! closed-form latency model of a blockchain-backed training round
//! ([`netsim`]). The simulation half wires these into a deterministic
//! discrete-event run of buses and roadside units ([`orchestrator`]), driven
//! from TOML scenario files and emitting CSV metrics plus an auditable chain
//! dump ([`cli`]).
//!
//! Every run is a pure function of its [`orchestrator::ScenarioConfig`]: the
//! same configuration and seed produce byte-identical outputs.

pub mod aggregation;
pub mod chain;
pub mod cli;
pub mod error;
pub mod model;
pub mod netsim;
pub mod orchestrator;
pub mod seed;

pub use error::{Error, Result};
