//! Loss-scaling step sequences for mixed-precision training.
//!
//! Steps are numbered
//!
//! 1. forward in working precision
//! 2. multiply the loss by `S`
//! 3. backward in working precision
//! 4. per-sample clipping and noise (`4s`: thresholds multiplied by `S`)
//! 5. divide gradients by `S` in master precision
//! 6. optimizer update
//!
//! and a [`Variant`] names the subset that runs. Scaling the loss before a
//! DP backward multiplies every per-sample gradient norm by `S`; when all
//! samples get clipped the factors shrink by `S` as well and unscaling then
//! shrinks the private gradient a second time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dp::{clipped_grads, ghost_grams, privatize, Clipping, DispatchRule, NoisePolicy, ResolvedClipPlan};
use crate::error::{Error, Result};
use crate::network::{backward_output_grads, forward, loss_and_grad, Batch, LayerParams, NetworkSpec};
use crate::numerics::{Precision, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "std-136")]
    Std136,
    #[serde(rename = "std-12356")]
    Std12356,
    #[serde(rename = "dp-123456")]
    Dp123456,
    #[serde(rename = "dp-1234s56")]
    Dp1234s56,
    #[serde(rename = "dp-1346")]
    Dp1346,
    #[serde(rename = "dp-12346")]
    Dp12346,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Std136, Variant::Std12356, Variant::Dp123456, Variant::Dp1234s56, Variant::Dp1346, Variant::Dp12346];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Std136 => "std-136",
            Variant::Std12356 => "std-12356",
            Variant::Dp123456 => "dp-123456",
            Variant::Dp1234s56 => "dp-1234s56",
            Variant::Dp1346 => "dp-1346",
            Variant::Dp12346 => "dp-12346",
        }
    }

    /// Step 2 runs.
    pub fn scales_loss(self) -> bool {
        !matches!(self, Variant::Std136 | Variant::Dp1346)
    }

    /// Step 4 runs.
    pub fn is_private(self) -> bool {
        self.as_str().starts_with("dp")
    }

    /// Step 4 uses thresholds multiplied by `S`.
    pub fn scales_threshold(self) -> bool {
        self == Variant::Dp1234s56
    }

    /// Step 5 runs.
    pub fn unscales(self) -> bool {
        matches!(self, Variant::Std12356 | Variant::Dp123456 | Variant::Dp1234s56)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == lower)
            .ok_or_else(|| Error::config("amp.variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPipeline {
    pub variant: Variant,
    /// Loss scale `S`; must be 1 for variants without step 2.
    pub scale: f64,
}

impl ScalingPipeline {
    pub fn new(variant: Variant, scale: f64) -> Result<Self> {
        let pipeline = Self { variant, scale };
        pipeline.validate()?;
        Ok(pipeline)
    }

    /// The recommended DP path: no loss scaling.
    pub fn unscaled_dp() -> Self {
        Self { variant: Variant::Dp1346, scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 1.0) || !self.scale.is_finite() {
            return Err(Error::config("amp.scale", format!("scale must be finite and at least 1, got {}", self.scale)));
        }
        if !self.variant.scales_loss() && self.scale != 1.0 {
            return Err(Error::config("amp.scale", format!("{} does not scale the loss; scale must be 1", self.variant)));
        }
        Ok(())
    }
}

/// Overflow and underflow observed while running a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowStatus {
    /// Some step produced an infinity.
    pub overflow: bool,
    /// Fraction of nonzero reference output-gradient elements that became zero.
    pub underflow_fraction: f64,
}

impl FlowStatus {
    /// Combine two observations: overflow is sticky, underflow takes the larger fraction.
    pub fn merge(self, other: FlowStatus) -> FlowStatus {
        FlowStatus {
            overflow: self.overflow || other.overflow,
            underflow_fraction: self.underflow_fraction.max(other.underflow_fraction),
        }
    }
}

fn underflow_count(reference: &[f64], emulated: &[f64]) -> (usize, usize) {
    reference.iter().zip(emulated).fold((0, 0), |(lost, total), (&r, &e)| {
        if r != 0.0 {
            (lost + usize::from(e == 0.0), total + 1)
        } else {
            (lost, total)
        }
    })
}

fn fraction((lost, total): (usize, usize)) -> f64 {
    if total == 0 {
        0.0
    } else {
        lost as f64 / total as f64
    }
}

/// Build the ghost-norm Gram matrices of `a` and an already loss-scaled
/// output gradient under `precision` and report infinities and flushed entries.
pub fn detect_overflow_in_ghost_terms(a: &Tensor, g_scaled: &Tensor, precision: Precision) -> Result<FlowStatus> {
    let emulated = ghost_grams(&a.round_to(precision), &g_scaled.round_to(precision), precision)?;
    let reference = ghost_grams(a, g_scaled, Precision::F64)?;
    let mut overflow = false;
    let mut counts = (0, 0);
    for ((ea, eg), (ra, rg)) in emulated.iter().zip(&reference) {
        overflow |= ea.iter().chain(eg).any(|x| x.is_infinite());
        for (r, e) in [(ra, ea), (rg, eg)] {
            let (l, t) = underflow_count(r, e);
            counts = (counts.0 + l, counts.1 + t);
        }
    }
    Ok(FlowStatus { overflow, underflow_fraction: fraction(counts) })
}

/// Everything [`run_pipeline`] needs besides the network.
#[derive(Debug, Clone, Copy)]
pub struct PipelineInputs<'a> {
    pub pipeline: ScalingPipeline,
    pub clip: &'a ResolvedClipPlan,
    pub noise: &'a NoisePolicy,
    /// Noise for parameter tensor `k` is drawn from `noise_rng.fork(k)`.
    pub noise_rng: &'a RngStream,
    pub rule: DispatchRule,
    pub precision: Precision,
    pub checkpointing: bool,
}

/// Gradient of one batch after the variant's steps 1-5, in master precision
/// and canonical tensor order (`None` for frozen tensors).
///
/// With `precision = F64` nothing is rounded, which isolates the algebra of
/// the step sequence from precision effects.
pub fn run_pipeline(
    spec: &NetworkSpec,
    params: &[LayerParams],
    batch: &Batch,
    inputs: PipelineInputs<'_>,
) -> Result<(Vec<Option<Tensor>>, FlowStatus)> {
    let PipelineInputs { pipeline, clip, noise, noise_rng, rule, precision, checkpointing } = inputs;
    pipeline.validate()?;
    let variant = pipeline.variant;
    let s = if variant.scales_loss() { pipeline.scale } else { 1.0 };
    let master = precision.master();

    // Steps 1-3.
    let (_, cache) = forward(spec, params, batch, precision, checkpointing)?;
    let (_, dy) = loss_and_grad(spec.loss, cache.output()?, &batch.targets, s, precision)?;
    let emulated = backward_output_grads(spec, params, &cache, &dy)?;
    let mut overflow = emulated.iter().any(Tensor::has_infinity);
    let working: Vec<LayerParams> = params.iter().map(|p| p.round_to(precision)).collect();
    let (_, ref_cache) = forward(spec, &working, batch, Precision::F64, false)?;
    let (_, ref_dy) = loss_and_grad(spec.loss, ref_cache.output()?, &batch.targets, 1.0, Precision::F64)?;
    let reference = backward_output_grads(spec, &working, &ref_cache, &ref_dy)?;
    let counts = reference.iter().zip(&emulated).fold((0, 0), |acc, (r, e)| {
        let (l, t) = underflow_count(r.data(), e.data());
        (acc.0 + l, acc.1 + t)
    });

    // Step 4.
    let scaled_plan;
    let clipping = if variant.is_private() {
        scaled_plan = if variant.scales_threshold() { clip.scaled(s) } else { clip.clone() };
        Some(Clipping { plan: &scaled_plan, rule })
    } else {
        None
    };
    let (grads, report) = clipped_grads(spec, params, &cache, &dy, clipping)?;
    overflow |= report.overflow;
    let std = clipping.map_or(0.0, |c| noise.std(c.plan));

    let mut out = Vec::with_capacity(grads.len());
    for (k, g) in grads.into_iter().enumerate() {
        let Some(g) = g else {
            out.push(None);
            continue;
        };
        let mut g = g.round_to(master);
        if clipping.is_some() {
            g = privatize(&g, std, &mut noise_rng.fork(k as u64), master)?;
        }
        // Step 5.
        if variant.unscales() {
            g = g.map(|x| x / s);
        }
        overflow |= g.has_infinity();
        out.push(Some(g));
    }
    Ok((out, FlowStatus { overflow, underflow_fraction: fraction(counts) }))
}
