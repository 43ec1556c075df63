//! Tiered checkpointing engine for fault-tolerant iterative training, plus a
//! deterministic discrete-event cluster simulator that injects software, node,
//! and rack failures and drives the save / retrieve / reclaim protocols.
//!
//! The crate is organized around the checkpoint lifecycle:
//!
//! - [`state`]: synthetic training workload (deterministic gradients, Adam,
//!   optimizer-state sharding) providing a ground-truth reference.
//! - [`compress`]: adaptive gradient compression for differential checkpoints.
//! - [`tier`]: the three storage tiers (local memory, peer memory, persistent
//!   directory) and the marker-based Tier-3 commit protocol.
//! - [`saver`]: per-iteration differential batching and paced base-checkpoint
//!   replication.
//! - [`recovery`]: post-failure consensus, cost-ordered shard loading, and
//!   fused multi-step replay.
//! - [`reclaim`]: watermark-driven cross-tier garbage collection.
//! - [`sim`]: the virtual-clock cluster simulator tying it all together.

pub mod compress;
pub mod config;
pub mod error;
pub mod events;
pub mod f16;
pub mod metrics;
pub mod reclaim;
pub mod recovery;
pub mod report;
pub mod rng;
pub mod safety;
pub mod saver;
pub mod sim;
pub mod state;
pub mod tier;
pub mod topology;

pub use compress::{CompressConfig, CompressedPayload};
pub use config::ScenarioConfig;
pub use error::{ConfigError, ProtocolError, RecoveryError, StoreError};
pub use recovery::{AvailabilityTuple, RecoveryPlan};
pub use sim::Simulation;
pub use state::{AdamParams, GradientShard, TrainingState, Workload};
pub use tier::{DiffRange, Tier, Version};
pub use topology::Topology;
