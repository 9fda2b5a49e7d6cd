//! Lockstep simulation of sharded data-parallel DP training.
//!
//! Workers run the same program on different micro-batches. Parameters,
//! gradients and optimizer states are replicated or split into contiguous
//! per-tensor shards depending on the [`Stage`]; data crosses workers only
//! through the logged collectives of [`Communicator`].

mod collective;
mod data;
mod engine;
mod memory;
mod optim;
mod shard;

pub use collective::{CallSite, CollectiveLog, CollectiveOp, CollectiveRecord, Communicator};
pub use data::DataSpec;
pub use engine::{MemoryAudit, ReferenceTrainer, Simulator, StepRecord, TrainSetup, WorkerState};
pub use memory::{bytes_per_param, max_trainable_model, memory_footprint, MemoryFootprint};
pub use optim::{OptimizerKind, OptimizerSpec, OptimizerState};
pub use shard::{Region, ShardLayout, ShardPlan, Stage};
