use serde::{Deserialize, Serialize};

use super::shard::ShardLayout;
use crate::error::{Error, Result};
use crate::numerics::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveOp {
    AllGather,
    ReduceScatter,
    Reduce,
}

/// One collective call. `elements` is the per-worker volume charged: the
/// logical tensor length, or zero on a single worker where nothing moves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveRecord {
    pub op: CollectiveOp,
    pub elements: usize,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tensor: Option<usize>,
}

/// Append-only record of every collective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectiveLog {
    records: Vec<CollectiveRecord>,
}

impl CollectiveLog {
    pub fn records(&self) -> &[CollectiveRecord] {
        &self.records
    }

    /// Per-worker elements moved during `step`.
    pub fn step_volume(&self, step: u64) -> usize {
        self.records.iter().filter(|r| r.step == step).map(|r| r.elements).sum()
    }

    /// Per-worker elements moved by `op` during `step`.
    pub fn step_volume_of(&self, step: u64, op: CollectiveOp) -> usize {
        self.records.iter().filter(|r| r.step == step && r.op == op).map(|r| r.elements).sum()
    }

    pub fn total_volume(&self) -> usize {
        self.records.iter().map(|r| r.elements).sum()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Tag attached to a collective call.
#[derive(Debug, Clone, Copy, Default)]
pub struct CallSite {
    pub layer: Option<usize>,
    pub tensor: Option<usize>,
}

/// Lockstep collectives over simulated workers.
///
/// Reductions fold contributions left to right in ascending rank with the
/// running sum rounded to the reduction precision after every addition, so
/// a reduction's result does not depend on how workers are scheduled.
#[derive(Debug, Clone)]
pub struct Communicator {
    workers: usize,
    step: u64,
    log: CollectiveLog,
}

impl Communicator {
    pub fn new(workers: usize) -> Self {
        Self { workers, step: 0, log: CollectiveLog::default() }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn log(&self) -> &CollectiveLog {
        &self.log
    }

    fn record(&mut self, op: CollectiveOp, len: usize, site: CallSite) {
        let elements = if self.workers > 1 { len } else { 0 };
        self.log.records.push(CollectiveRecord { op, elements, step: self.step, layer: site.layer, tensor: site.tensor });
    }

    fn check_count(&self, n: usize) -> Result<()> {
        if n != self.workers {
            return Err(Error::contract(format!("collective over {} workers received {n} inputs", self.workers)));
        }
        Ok(())
    }

    /// Every worker receives the full tensor assembled from all shards.
    pub fn all_gather(&mut self, shards: &[&[f64]], layout: ShardLayout, site: CallSite) -> Result<Vec<f64>> {
        self.check_count(shards.len())?;
        let full = layout.assemble(shards)?;
        self.record(CollectiveOp::AllGather, layout.len, site);
        Ok(full)
    }

    /// Worker `r` receives shard `r` of the elementwise sum of all inputs.
    pub fn reduce_scatter(
        &mut self,
        inputs: &[&[f64]],
        layout: ShardLayout,
        precision: Precision,
        site: CallSite,
    ) -> Result<Vec<Vec<f64>>> {
        let sum = self.fold(inputs, layout.len, precision)?;
        self.record(CollectiveOp::ReduceScatter, layout.len, site);
        Ok((0..self.workers).map(|r| layout.shard(&sum, r)).collect())
    }

    /// The elementwise sum of all inputs, delivered to one root worker.
    pub fn reduce(&mut self, inputs: &[&[f64]], precision: Precision, site: CallSite) -> Result<Vec<f64>> {
        let len = inputs.first().map_or(0, |x| x.len());
        let sum = self.fold(inputs, len, precision)?;
        self.record(CollectiveOp::Reduce, len, site);
        Ok(sum)
    }

    fn fold(&self, inputs: &[&[f64]], len: usize, precision: Precision) -> Result<Vec<f64>> {
        self.check_count(inputs.len())?;
        for x in inputs {
            if x.len() != len {
                return Err(Error::ShapeMismatch { op: "reduction", left: vec![len], right: vec![x.len()] });
            }
        }
        let mut sum = inputs[0].to_vec();
        for x in &inputs[1..] {
            for (acc, &v) in sum.iter_mut().zip(*x) {
                *acc = precision.round(*acc + v);
            }
        }
        Ok(sum)
    }
}
