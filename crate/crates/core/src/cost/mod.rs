//! Closed-form cost model: flop counts per training step, per-worker
//! communication volume and time, model-state memory, and the speed ratio of
//! private to non-private training.
//!
//! Flops are the primary unit. Communication is converted to seconds with
//! user-supplied bandwidths and folded into the speed ratio through the
//! device throughput.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Precision;
use crate::zero::{memory_footprint, OptimizerKind, Stage};

pub use crate::zero::max_trainable_model;

/// Default flop coefficient of the per-sample clipping work, per token and trainable parameter.
pub const DEFAULT_DP_OVERHEAD: f64 = 0.666;

fn default_overhead() -> f64 {
    DEFAULT_DP_OVERHEAD
}

fn default_bytes() -> usize {
    2
}

fn default_accumulation() -> usize {
    1
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_tflops() -> f64 {
    100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    /// GB/s between workers on one node.
    pub intra_gbps: f64,
    /// GB/s between nodes.
    pub inter_gbps: f64,
    pub workers_per_node: usize,
}

impl Default for Bandwidth {
    fn default() -> Self {
        Self { intra_gbps: 100.0, inter_gbps: 10.0, workers_per_node: 8 }
    }
}

/// One configuration to cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Per-worker micro-batch size.
    pub batch: f64,
    /// Tokens per sample.
    pub tokens: f64,
    pub psi_model: f64,
    /// Trainable parameters; equal to `psi_model` when absent.
    #[serde(default)]
    pub psi_train: Option<f64>,
    pub workers: usize,
    pub stage: Stage,
    pub dp_enabled: bool,
    #[serde(default = "default_overhead")]
    pub dp_overhead_coeff: f64,
    #[serde(default)]
    pub checkpointing: bool,
    /// Coefficient of the `B·T²` attention term, if any.
    #[serde(default)]
    pub attention_coeff: Option<f64>,
    #[serde(default)]
    pub bandwidth: Bandwidth,
    /// 2 for half precision, 4 for single, 8 for double.
    #[serde(default = "default_bytes")]
    pub bytes_per_element: usize,
    #[serde(default = "default_accumulation")]
    pub accumulation: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Sustained device throughput used to express communication in flops.
    #[serde(default = "default_tflops")]
    pub device_tflops: f64,
    /// Per-worker memory budget; enables the largest-trainable-model column.
    #[serde(default)]
    pub memory_budget_gb: Option<f64>,
}

impl CostInputs {
    /// Full training of a `psi`-parameter model with defaults elsewhere.
    pub fn new(batch: f64, tokens: f64, psi: f64, workers: usize, stage: Stage, dp_enabled: bool) -> Self {
        Self {
            batch,
            tokens,
            psi_model: psi,
            psi_train: None,
            workers,
            stage,
            dp_enabled,
            dp_overhead_coeff: DEFAULT_DP_OVERHEAD,
            checkpointing: false,
            attention_coeff: None,
            bandwidth: Bandwidth::default(),
            bytes_per_element: default_bytes(),
            accumulation: 1,
            optimizer: OptimizerKind::Adam,
            device_tflops: default_tflops(),
            memory_budget_gb: None,
        }
    }

    pub fn psi_train(&self) -> f64 {
        self.psi_train.unwrap_or(self.psi_model)
    }

    pub fn peft(&self) -> bool {
        self.psi_train() < self.psi_model
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.bytes_per_element {
            2 => Ok(Precision::F16),
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            other => Err(Error::config("bytes_per_element", format!("expected 2, 4 or 8, got {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| Err(Error::config(path, msg));
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !nonneg(self.batch) || !nonneg(self.tokens) || !nonneg(self.psi_model) {
            return bad("batch", "batch, tokens and psi_model must be finite and nonnegative");
        }
        if !nonneg(self.psi_train()) || self.psi_train() > self.psi_model {
            return bad("psi_train", "trainable parameters must lie in [0, psi_model]");
        }
        if self.workers == 0 {
            return bad("workers", "at least one worker is required");
        }
        if !nonneg(self.dp_overhead_coeff) {
            return bad("dp_overhead_coeff", "overhead coefficient must be nonnegative");
        }
        if self.attention_coeff.is_some_and(|c| !nonneg(c)) {
            return bad("attention_coeff", "attention coefficient must be nonnegative");
        }
        let bw = &self.bandwidth;
        if !(bw.intra_gbps > 0.0 && bw.inter_gbps > 0.0) || bw.workers_per_node == 0 {
            return bad("bandwidth", "bandwidths and workers per node must be positive");
        }
        if self.accumulation == 0 {
            return bad("accumulation", "accumulation must be at least 1");
        }
        if !(self.device_tflops > 0.0) {
            return bad("device_tflops", "device throughput must be positive");
        }
        if self.memory_budget_gb.is_some_and(|m| !(m > 0.0)) {
            return bad("memory_budget_gb", "memory budget must be positive");
        }
        self.precision().map(|_| ())
    }
}

/// Flop counts of one micro-batch on one worker.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub forward: f64,
    pub output_grad: f64,
    pub param_grad: f64,
    pub dp_overhead: f64,
    pub attention: f64,
}

impl FlopBreakdown {
    /// Back-propagation flops without the private overhead.
    pub fn backward(&self) -> f64 {
        self.output_grad + self.param_grad
    }

    pub fn total(&self) -> f64 {
        self.forward + self.backward() + self.dp_overhead + self.attention
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommEstimate {
    /// Elements sent per worker per step.
    pub elements: f64,
    pub bytes: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: FlopBreakdown,
    pub comm: CommEstimate,
    pub memory_params_bytes: f64,
    pub memory_grads_bytes: f64,
    pub memory_states_bytes: f64,
    pub memory_bytes: f64,
    pub relative_speed: f64,
    pub max_trainable_params: Option<f64>,
}

/// Flop components of one micro-batch on one worker.
pub fn time_components(input: &CostInputs) -> FlopBreakdown {
    let tokens = input.batch * input.tokens;
    let forward = 2.0 * tokens * input.psi_model;
    FlopBreakdown {
        forward: if input.checkpointing { 2.0 * forward } else { forward },
        output_grad: 2.0 * tokens * input.psi_model,
        param_grad: 2.0 * tokens * input.psi_train(),
        dp_overhead: if input.dp_enabled { input.dp_overhead_coeff * tokens * input.psi_train() } else { 0.0 },
        attention: input.attention_coeff.map_or(0.0, |c| c * input.batch * input.tokens * input.tokens),
    }
}

/// Elements each worker sends per optimizer step, with the matching bytes and seconds.
///
/// Gradients cross the network once reduced and updated parameters once
/// gathered, so stages 0 and 1 move `2Ψ_train`. Stage 2 reduce-scatters on
/// every micro-step: `(A+1)Ψ_train`. Stage 3 gathers every parameter for the
/// forward and again for the backward of each micro-step and reduce-scatters
/// the trainable gradients: `A(2Ψ_model + Ψ_train)`. Frozen parameters never
/// move below stage 3.
pub fn comm_volume(input: &CostInputs) -> CommEstimate {
    let elements = if input.workers <= 1 {
        0.0
    } else {
        let a = input.accumulation as f64;
        let train = input.psi_train();
        match input.stage {
            Stage::Ddp | Stage::Zero1 => 2.0 * train,
            Stage::Zero2 => (a + 1.0) * train,
            Stage::Zero3 => a * (2.0 * input.psi_model + train),
        }
    };
    let bytes = elements * input.bytes_per_element as f64;
    let bw = &input.bandwidth;
    let gbps = if input.workers > bw.workers_per_node { bw.inter_gbps } else { bw.intra_gbps };
    CommEstimate { elements, bytes, seconds: bytes / (gbps * 1e9) }
}

/// Throughput of private training relative to non-private training of the
/// same configuration, with communication expressed in flops.
pub fn relative_speed(input: &CostInputs) -> f64 {
    let flops = time_components(input);
    let a = input.accumulation as f64;
    let comm = comm_volume(input).seconds * input.device_tflops * 1e12;
    let shared = a * (flops.forward + flops.attention) + comm;
    let plain = a * flops.backward() + shared;
    let private = plain + a * flops.dp_overhead;
    if private == 0.0 {
        1.0
    } else {
        plain / private
    }
}

pub fn report(input: &CostInputs) -> Result<CostReport> {
    input.validate()?;
    let memory =
        memory_footprint(input.stage, input.workers, input.optimizer, input.psi_model, input.psi_train(), input.precision()?);
    Ok(CostReport {
        flops: time_components(input),
        comm: comm_volume(input),
        memory_params_bytes: memory.params,
        memory_grads_bytes: memory.grads,
        memory_states_bytes: memory.states,
        memory_bytes: memory.total(),
        relative_speed: relative_speed(input),
        max_trainable_params: input.memory_budget_gb.map(|gb| max_trainable_model(gb * 1e9, input.workers, input.stage)),
    })
}

/// Flat record of inputs and results, one per costed configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub batch: f64,
    pub tokens: f64,
    pub psi_model: f64,
    pub psi_train: f64,
    pub peft: bool,
    pub workers: usize,
    pub stage: u8,
    pub dp_enabled: bool,
    pub dp_overhead_coeff: f64,
    pub checkpointing: bool,
    pub attention_coeff: f64,
    pub intra_gbps: f64,
    pub inter_gbps: f64,
    pub workers_per_node: usize,
    pub bytes_per_element: usize,
    pub accumulation: usize,
    pub device_tflops: f64,
    pub memory_budget_gb: Option<f64>,
    pub forward_flops: f64,
    pub output_grad_flops: f64,
    pub param_grad_flops: f64,
    pub dp_overhead_flops: f64,
    pub attention_flops: f64,
    pub total_flops: f64,
    pub comm_elements: f64,
    pub comm_bytes: f64,
    pub comm_seconds: f64,
    pub memory_params_bytes: f64,
    pub memory_grads_bytes: f64,
    pub memory_states_bytes: f64,
    pub memory_bytes: f64,
    pub relative_speed: f64,
    pub max_trainable_params: Option<f64>,
}

impl CostRow {
    pub fn new(input: &CostInputs) -> Result<Self> {
        let r = report(input)?;
        Ok(Self {
            batch: input.batch,
            tokens: input.tokens,
            psi_model: input.psi_model,
            psi_train: input.psi_train(),
            peft: input.peft(),
            workers: input.workers,
            stage: input.stage.index(),
            dp_enabled: input.dp_enabled,
            dp_overhead_coeff: input.dp_overhead_coeff,
            checkpointing: input.checkpointing,
            attention_coeff: input.attention_coeff.unwrap_or(0.0),
            intra_gbps: input.bandwidth.intra_gbps,
            inter_gbps: input.bandwidth.inter_gbps,
            workers_per_node: input.bandwidth.workers_per_node,
            bytes_per_element: input.bytes_per_element,
            accumulation: input.accumulation,
            device_tflops: input.device_tflops,
            memory_budget_gb: input.memory_budget_gb,
            forward_flops: r.flops.forward,
            output_grad_flops: r.flops.output_grad,
            param_grad_flops: r.flops.param_grad,
            dp_overhead_flops: r.flops.dp_overhead,
            attention_flops: r.flops.attention,
            total_flops: r.flops.total(),
            comm_elements: r.comm.elements,
            comm_bytes: r.comm.bytes,
            comm_seconds: r.comm.seconds,
            memory_params_bytes: r.memory_params_bytes,
            memory_grads_bytes: r.memory_grads_bytes,
            memory_states_bytes: r.memory_states_bytes,
            memory_bytes: r.memory_bytes,
            relative_speed: r.relative_speed,
            max_trainable_params: r.max_trainable_params,
        })
    }
}

/// Values to substitute into a base configuration; every combination is costed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub stage: Vec<Stage>,
    #[serde(default)]
    pub workers: Vec<usize>,
    #[serde(default)]
    pub psi_train_fraction: Vec<f64>,
    #[serde(default)]
    pub dp_enabled: Vec<bool>,
    #[serde(default)]
    pub checkpointing: Vec<bool>,
}

/// A base configuration and an optional sweep over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub base: CostInputs,
    #[serde(default)]
    pub sweep: Sweep,
}

impl CostConfig {
    /// Parse either `{"base": .., "sweep": ..}` or a bare input row.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let wrapped = if value.get("base").is_some() { value } else { serde_json::json!({ "base": value }) };
        serde_path_to_error::deserialize(wrapped).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })
    }

    /// Expanded configurations, later sweep axes varying fastest.
    pub fn expand(&self) -> Vec<CostInputs> {
        fn axis<T: Clone>(values: &[T], current: T) -> Vec<T> {
            if values.is_empty() {
                vec![current]
            } else {
                values.to_vec()
            }
        }
        let b = &self.base;
        let fractions = axis(&self.sweep.psi_train_fraction, b.psi_train() / b.psi_model.max(f64::MIN_POSITIVE));
        let mut out = Vec::new();
        for stage in axis(&self.sweep.stage, b.stage) {
            for workers in axis(&self.sweep.workers, b.workers) {
                for &fraction in &fractions {
                    for dp_enabled in axis(&self.sweep.dp_enabled, b.dp_enabled) {
                        for checkpointing in axis(&self.sweep.checkpointing, b.checkpointing) {
                            let psi_train = if self.sweep.psi_train_fraction.is_empty() {
                                b.psi_train
                            } else {
                                Some(fraction * b.psi_model)
                            };
                            out.push(CostInputs { stage, workers, psi_train, dp_enabled, checkpointing, ..b.clone() });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn rows(&self) -> Result<Vec<CostRow>> {
        self.expand().iter().map(CostRow::new).collect()
    }
}

#[cfg(test)]
mod tests;
