use serde::{Deserialize, Serialize};

use super::clip::ResolvedClipPlan;
use crate::error::Result;
use crate::numerics::{Precision, RngStream, Tensor};

/// How the per-lane noise shares are seeded.
///
/// The private gradient is assembled from `K` lanes (micro-batches across
/// workers and accumulation steps), each adding its own share of noise.
/// With a shared seed every lane draws the same vector and adds `std/K`
/// of it; with independent seeds every lane draws its own vector and adds
/// `std/√K`. Both sum to noise of standard deviation `std`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    SharedSeed,
    IndependentSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePolicy {
    /// Noise multiplier σ_DP; zero disables noise.
    pub sigma: f64,
    pub mode: NoiseMode,
    /// Overrides `‖[R_1, …, R_M]‖` as the noise sensitivity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
}

impl NoisePolicy {
    pub fn new(sigma: f64, mode: NoiseMode) -> Self {
        Self { sigma, mode, sensitivity: None }
    }

    pub fn none() -> Self {
        Self::new(0.0, NoiseMode::SharedSeed)
    }

    pub fn is_private(&self) -> bool {
        self.sigma > 0.0
    }

    pub fn sensitivity(&self, plan: &ResolvedClipPlan) -> f64 {
        self.sensitivity.unwrap_or_else(|| plan.threshold_norm())
    }

    /// Total noise std `σ_DP · sensitivity` of the aggregated gradient.
    pub fn std(&self, plan: &ResolvedClipPlan) -> f64 {
        self.sigma * self.sensitivity(plan)
    }

    /// Std each of `lanes` contributions adds so that the sum has std `total`.
    pub fn share_std(&self, total: f64, lanes: usize) -> f64 {
        match self.mode {
            NoiseMode::SharedSeed => total / lanes as f64,
            NoiseMode::IndependentSeeds => total / (lanes as f64).sqrt(),
        }
    }

    /// RNG lane used by micro-batch `index`.
    pub fn lane(&self, index: usize) -> u64 {
        match self.mode {
            NoiseMode::SharedSeed => 0,
            NoiseMode::IndependentSeeds => index as u64,
        }
    }
}

/// `clipped + std · N(0, I)` with the sum rounded to `precision`.
///
/// A zero `std` returns the input unchanged (bit for bit).
pub fn privatize(clipped: &Tensor, std: f64, rng: &mut RngStream, precision: Precision) -> Result<Tensor> {
    if std == 0.0 {
        return Ok(clipped.clone());
    }
    let mut out = Vec::with_capacity(clipped.len());
    for &x in clipped.data() {
        out.push(precision.round(x + precision.round(std * rng.standard_normal())));
    }
    Tensor::new(clipped.shape().to_vec(), out, precision)
}
