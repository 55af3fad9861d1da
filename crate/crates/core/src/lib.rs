//! GeoBFT protocol library.
//!
//! Replicas are grouped into clusters that each run PBFT to certify one
//! request per round, share certified requests with every other cluster and
//! execute rounds in a fixed cluster order. Every state machine here is
//! sans-IO: handlers consume messages and return effects, and the simulator
//! in `geobft-sim` drives them.

pub mod codec;
pub mod crypto;
pub mod global_sharing;
pub mod local_replication;
pub mod messages;
pub mod ordering;
pub mod remote_viewchange;
pub mod replica;
pub mod testing;
pub mod types;
