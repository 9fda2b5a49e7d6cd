use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkSpec;

/// How much of the model state is partitioned across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Plain data parallelism: everything replicated.
    Ddp,
    /// Optimizer states partitioned.
    Zero1,
    /// Optimizer states and gradients partitioned.
    Zero2,
    /// Optimizer states, gradients and parameters partitioned.
    Zero3,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Ddp, Stage::Zero1, Stage::Zero2, Stage::Zero3];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn shards_states(self) -> bool {
        self >= Stage::Zero1
    }

    pub fn shards_grads(self) -> bool {
        self >= Stage::Zero2
    }

    pub fn shards_params(self) -> bool {
        self == Stage::Zero3
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Stage::ALL.get(v as usize).copied().ok_or_else(|| format!("stage must be 0, 1, 2 or 3, got {v}"))
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.index()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Split of one flat tensor of `len` elements into `workers` contiguous
/// chunks of `chunk = ⌈len / workers⌉` elements, the last ones zero-padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardLayout {
    pub len: usize,
    pub workers: usize,
    pub chunk: usize,
}

impl ShardLayout {
    pub fn new(len: usize, workers: usize) -> Self {
        assert!(workers > 0, "a layout needs at least one worker");
        Self { len, workers, chunk: len.div_ceil(workers) }
    }

    /// Logical (unpadded) index range owned by `rank`.
    pub fn range(&self, rank: usize) -> std::ops::Range<usize> {
        let start = (rank * self.chunk).min(self.len);
        let end = ((rank + 1) * self.chunk).min(self.len);
        start..end
    }

    /// Shard `rank` of `full`, zero-padded to `chunk` elements.
    pub fn shard(&self, full: &[f64], rank: usize) -> Vec<f64> {
        let mut out = full[self.range(rank)].to_vec();
        out.resize(self.chunk, 0.0);
        out
    }

    /// Concatenate shards in rank order and drop padding.
    pub fn assemble(&self, shards: &[&[f64]]) -> Result<Vec<f64>> {
        if shards.len() != self.workers {
            return Err(Error::contract(format!("expected {} shards, got {}", self.workers, shards.len())));
        }
        let mut out = Vec::with_capacity(self.workers * self.chunk);
        for (rank, s) in shards.iter().enumerate() {
            if s.len() != self.chunk {
                return Err(Error::contract(format!("shard {rank} has {} elements, expected {}", s.len(), self.chunk)));
            }
            out.extend_from_slice(s);
        }
        out.truncate(self.len);
        Ok(out)
    }
}

/// Stage, worker count and per-tensor layouts (canonical tensor order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub stage: Stage,
    pub workers: usize,
    pub layouts: Vec<ShardLayout>,
}

impl ShardPlan {
    pub fn new(spec: &NetworkSpec, stage: Stage, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config("shard.workers", "at least one worker is required"));
        }
        let layouts = spec.param_tensors().iter().map(|t| ShardLayout::new(t.len, workers)).collect();
        Ok(Self { stage, workers, layouts })
    }
}

/// A worker's slice of one flat tensor.
///
/// A replicated region owns every index. Reads outside the owned range
/// panic: data held by another worker is only reachable through a
/// collective.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    layout: ShardLayout,
    rank: usize,
    sharded: bool,
    data: Vec<f64>,
}

impl Region {
    pub fn replicated(full: Vec<f64>, layout: ShardLayout, rank: usize) -> Self {
        assert_eq!(full.len(), layout.len, "replicated region must hold the whole tensor");
        Self { layout, rank, sharded: false, data: full }
    }

    pub fn sharded(full: &[f64], layout: ShardLayout, rank: usize) -> Self {
        Self { layout, rank, sharded: true, data: layout.shard(full, rank) }
    }

    pub fn from_shard(shard: Vec<f64>, layout: ShardLayout, rank: usize) -> Self {
        assert_eq!(shard.len(), layout.chunk, "shard length does not match layout");
        Self { layout, rank, sharded: true, data: shard }
    }

    pub fn is_sharded(&self) -> bool {
        self.sharded
    }

    pub fn layout(&self) -> ShardLayout {
        self.layout
    }

    /// Logical indices this worker owns.
    pub fn owned(&self) -> std::ops::Range<usize> {
        if self.sharded {
            self.layout.range(self.rank)
        } else {
            0..self.layout.len
        }
    }

    /// Element at logical index `i` of the full tensor.
    pub fn get(&self, i: usize) -> f64 {
        let owned = self.owned();
        assert!(
            owned.contains(&i),
            "worker {} read index {i} outside its owned range {owned:?} without a collective",
            self.rank
        );
        if self.sharded {
            self.data[i - owned.start]
        } else {
            self.data[i]
        }
    }

    /// Local storage (a padded shard or the whole tensor).
    pub fn local(&self) -> &[f64] {
        &self.data
    }

    pub fn local_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Elements allocated by this region, padding included.
    pub fn allocated(&self) -> usize {
        self.data.len()
    }
}
