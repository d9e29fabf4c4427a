//! Hierarchical super-peer distributed hash table for replicated objects.
//!
//! Agents are grouped into clusters, each headed by an RAgent that keeps the
//! cluster's meta-data catalogue. Lookup services track live RAgents. Every
//! object lives on two Agents of one cluster; updates go through the owner,
//! and a secondary Agent holds a backup of the catalogue so the cluster
//! survives the loss of its RAgent.
//!
//! The protocol runs inside a deterministic discrete-event simulator
//! ([`sim::Simulation`]) that counts messages and search steps.

pub mod catalogue;
pub mod cli;
pub mod dataops;
pub mod error;
pub mod lus;
pub mod membership;
pub mod node;
pub mod protocol;
pub mod sim;
pub mod types;

pub use error::Error;
pub use sim::{SimConfig, SimTime, Simulation};
pub use types::{DistObject, NodeId, ObjectId, PatternKey};
