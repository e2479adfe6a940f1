//! Elastic model sharding and latency-bounded pipelined execution.
//!
//! A layered model is cut into vertical shards, each stored on disk at several
//! quantized bitwidths. Given a target latency, the planner picks the largest
//! submodel the compute budget allows and then assigns per-shard bitwidths so
//! that IO for layer `j+1` always finishes while layer `j` computes. The
//! executor runs the plan as a two-stage IO/compute pipeline with a preload
//! buffer for the bottom layers.

pub mod bitpack;
pub mod exec;
pub mod model;
pub mod plan;
pub mod preprocess;
pub mod profile;
pub mod quant;
pub mod report;
pub mod sim;
pub mod store;
pub mod synth;
pub mod time;
pub mod trace;

pub use model::{
    AibLedger, Bitwidth, BitwidthGrid, ExecutionPlan, HardwareProfile, ImportanceMap,
    ModelManifest, ShardDims, ShardId, ShardVersion, SubmodelShape,
};
pub use time::Micros;
