//! Deployment flow for heterogeneous PULP clusters.
//!
//! A quantized network graph ([`graph`]) is fused and mapped onto the
//! cluster's engines ([`lowering`]), each fused node is tiled for the L1
//! scratchpad by a branch-and-bound search ([`tiler`]), the tiles are
//! expanded into a double-buffered action DAG ([`schedule`]) and that DAG
//! is executed by an event-driven model of the cluster ([`sim`]). Cost
//! models and platform descriptions live in [`platform`].

pub mod graph;
pub mod lowering;
pub mod par;
pub mod pipeline;
pub mod platform;
pub mod schedule;
pub mod sim;
pub mod tiler;
