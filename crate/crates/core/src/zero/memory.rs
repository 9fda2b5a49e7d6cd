use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use super::shard::Stage;
use crate::numerics::Precision;

/// Model-state bytes held by one worker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub params: f64,
    pub grads: f64,
    pub states: f64,
}

impl MemoryFootprint {
    pub fn total(&self) -> f64 {
        self.params + self.grads + self.states
    }
}

/// Per-worker model-state memory.
///
/// Working-precision parameters cover all `psi_model` parameters; gradients
/// and optimizer states (master copy plus moments, in master precision)
/// cover the `psi_train` trainable ones. Each part is divided by the worker
/// count once the stage shards it. With half precision, Adam and full
/// training this gives `16Ψ`, `(4 + 12/N)Ψ`, `(2 + 14/N)Ψ` and `16Ψ/N`
/// bytes for stages 0 to 3.
pub fn memory_footprint(
    stage: Stage,
    workers: usize,
    optimizer: OptimizerKind,
    psi_model: f64,
    psi_train: f64,
    precision: Precision,
) -> MemoryFootprint {
    let n = workers as f64;
    let split = |sharded: bool| if sharded { n } else { 1.0 };
    let working = precision.bytes() as f64;
    let master = precision.master().bytes() as f64;
    MemoryFootprint {
        params: psi_model * working / split(stage.shards_params()),
        grads: psi_train * working / split(stage.shards_grads()),
        states: psi_train * master * optimizer.state_tensors() as f64 / split(stage.shards_states()),
    }
}

/// Bytes per parameter for mixed-precision Adam with every parameter trainable.
pub fn bytes_per_param(stage: Stage, workers: usize) -> f64 {
    memory_footprint(stage, workers, OptimizerKind::Adam, 1.0, 1.0, Precision::F16).total()
}

/// Largest fully-trainable model whose model states fit in `budget_bytes` per worker.
pub fn max_trainable_model(budget_bytes: f64, workers: usize, stage: Stage) -> f64 {
    budget_bytes / bytes_per_param(stage, workers)
}
