//! Runs a [`RunConfig`] and renders its artifacts as JSON lines.
//!
//! * `trace.jsonl`: one line per step with the mean loss and the parameters after the update.
//! * `collectives.jsonl`: every collective call in order.
//! * `flow.jsonl`: overflow flag and underflow fraction per step.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::amp::FlowStatus;
use crate::config::RunConfig;
use crate::error::Result;
use crate::zero::{Simulator, StepRecord};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const COLLECTIVES_FILE: &str = "collectives.jsonl";
pub const FLOW_FILE: &str = "flow.jsonl";

#[derive(Serialize)]
struct TraceLine<'a> {
    step: u64,
    loss: f64,
    params: &'a [Vec<f64>],
}

#[derive(Serialize)]
struct FlowLine {
    step: u64,
    #[serde(flatten)]
    flow: FlowStatus,
}

/// Rendered outputs of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub trace: String,
    pub collectives: String,
    pub flow: String,
    pub records: Vec<StepRecord>,
}

impl Artifacts {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TRACE_FILE), &self.trace)?;
        fs::write(dir.join(COLLECTIVES_FILE), &self.collectives)?;
        fs::write(dir.join(FLOW_FILE), &self.flow)?;
        Ok(())
    }
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn run(config: &RunConfig) -> Result<Artifacts> {
    let mut sim = Simulator::new(config.to_setup()?)?;
    let records = sim.run(config.steps)?;
    Ok(Artifacts {
        trace: jsonl(records.iter().map(|r| TraceLine { step: r.step, loss: r.loss, params: &r.params }))?,
        collectives: sim.log().to_jsonl()?,
        flow: jsonl(records.iter().map(|r| FlowLine { step: r.step, flow: r.flow }))?,
        records,
    })
}
