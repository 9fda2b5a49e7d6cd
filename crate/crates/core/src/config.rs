//! Declarative run configuration, parsed from JSON.
//!
//! ```json
//! {
//!   "network": {"layers": [{"d_in": 4, "d_out": 2, "activation": "tanh", "tokens": 3}], "loss": "squared_error"},
//!   "data": {"micro_batch": 2},
//!   "shard": {"stage": 2, "workers": 4},
//!   "clipping": {"partition": "layer-wise", "function": "vanilla", "R": [1.0]},
//!   "noise": {"sigma": 0.5, "mode": "shared-seed"},
//!   "optimizer": {"kind": "adamw", "lr": 0.001},
//!   "amp": {"variant": "dp-1346", "scale": 1.0, "precision": "bf16"},
//!   "steps": 10
//! }
//! ```

use serde::{Deserialize, Serialize};

use crate::amp::{ScalingPipeline, Variant};
use crate::dp::{ClipFunction, ClipPlan, DispatchRule, NoisePolicy, Partition};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::numerics::Precision;
use crate::zero::{DataSpec, OptimizerSpec, Stage, TrainSetup};

/// Environment variable consulted when a config names no seed.
pub const SEED_ENV: &str = "DPZERO_SEED";

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn f64_precision() -> Precision {
    Precision::F64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Per-worker micro-batch size.
    pub micro_batch: usize,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub input_std: f64,
    #[serde(default = "one")]
    pub target_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardConfig {
    pub stage: Stage,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipFunctionName {
    Vanilla,
    Automatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClippingConfig {
    pub partition: Partition,
    pub function: ClipFunctionName,
    /// One threshold shared by every group, or one per group.
    #[serde(rename = "R")]
    pub thresholds: Vec<f64>,
    /// Stability constant of automatic clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl ClippingConfig {
    pub fn plan(&self) -> Result<ClipPlan> {
        let function = match (self.function, self.gamma) {
            (ClipFunctionName::Vanilla, None) => ClipFunction::Vanilla,
            (ClipFunctionName::Vanilla, Some(_)) => {
                return Err(Error::config("clipping.gamma", "gamma only applies to automatic clipping"))
            }
            (ClipFunctionName::Automatic, gamma) => ClipFunction::Automatic { gamma: gamma.unwrap_or(ClipFunction::DEFAULT_GAMMA) },
        };
        Ok(ClipPlan::new(self.partition.clone(), function, self.thresholds.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmpConfig {
    pub variant: Variant,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "f64_precision")]
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub data: DataConfig,
    pub shard: ShardConfig,
    #[serde(default = "one_usize")]
    pub accumulation_steps: usize,
    pub clipping: ClippingConfig,
    #[serde(default = "NoisePolicy::none")]
    pub noise: NoisePolicy,
    pub optimizer: OptimizerSpec,
    pub amp: AmpConfig,
    #[serde(default)]
    pub checkpointing: bool,
    pub steps: u64,
    /// Falls back to `DPZERO_SEED`, then 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Parse and validate; errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_setup()?.prepare().map(|_| ())
    }

    /// Seed in effect: the config's, else the environment override, else 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(seed) = self.seed {
            return Ok(seed);
        }
        match std::env::var(SEED_ENV) {
            Ok(text) => text
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}={text:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn to_setup(&self) -> Result<TrainSetup> {
        let seed = self.resolved_seed()?;
        Ok(TrainSetup {
            spec: self.network.clone(),
            data: DataSpec {
                seed: self.data.seed.unwrap_or(seed),
                input_std: self.data.input_std,
                target_std: self.data.target_std,
            },
            stage: self.shard.stage,
            workers: self.shard.workers,
            micro_batch: self.data.micro_batch,
            accumulation: self.accumulation_steps,
            clip: self.clipping.plan()?,
            noise: self.noise.clone(),
            optimizer: self.optimizer,
            amp: ScalingPipeline { variant: self.amp.variant, scale: self.amp.scale },
            precision: self.amp.precision,
            checkpointing: self.checkpointing,
            dispatch: DispatchRule::default(),
            seed,
        })
    }

    /// Samples per optimizer step: micro-batch × workers × accumulation.
    pub fn logical_batch(&self) -> usize {
        self.data.micro_batch * self.shard.workers * self.accumulation_steps
    }
}
