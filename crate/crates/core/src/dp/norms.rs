//! Per-sample gradient norms of linear layers.
//!
//! For a layer with input `a_i ∈ R^{T×d}` and output gradient
//! `g_i ∈ R^{T×p}`, the per-sample weight gradient is `a_iᵀ g_i` and
//!
//! ```text
//! ‖a_iᵀ g_i‖²_F = vec(a_i a_iᵀ) · vec(g_i g_iᵀ)
//! ```
//!
//! The left side materializes a `d×p` matrix per sample, the right side two
//! `T×T` Gram matrices. The mixed strategy picks whichever intermediate is
//! smaller, layer by layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{loss_precision, Trainable};
use crate::numerics::{gemm, Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    Instantiated,
    Ghost,
}

/// Crossover between the two norm methods.
///
/// Ghost is chosen when `grams · T² ≤ d · p`: the two `T×T` Gram matrices
/// hold no more elements than one instantiated `d×p` gradient. Ties go to
/// Ghost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchRule {
    pub grams: usize,
}

impl Default for DispatchRule {
    fn default() -> Self {
        Self { grams: 2 }
    }
}

impl DispatchRule {
    pub fn choose(self, t: usize, d: usize, p: usize) -> NormMethod {
        if self.grams * t * t <= d * p {
            NormMethod::Ghost
        } else {
            NormMethod::Instantiated
        }
    }
}

/// Mixed ghost norm dispatch with the default crossover `2T² ≤ dp`.
pub fn ghost_dispatch(t: usize, d: usize, p: usize) -> NormMethod {
    DispatchRule::default().choose(t, d, p)
}

fn check_pair(a: &Tensor, g: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, t, d) = a.dims3()?;
    let (b2, t2, p) = g.dims3()?;
    if b != b2 || t != t2 {
        return Err(Error::ShapeMismatch { op: "per-sample norm", left: a.shape().to_vec(), right: g.shape().to_vec() });
    }
    Ok((b, t, d, p))
}

/// Squared norms plus whether an intermediate overflowed to infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct NormOutcome {
    pub sq: Vec<f64>,
    pub overflow: bool,
}

/// `‖a_iᵀ g_i‖²_F` by forming each per-sample gradient.
pub fn psg_norm_instantiated(a: &Tensor, g: &Tensor) -> Result<Vec<f64>> {
    Ok(psg_norm_instantiated_in(a, g, Precision::F64)?.sq)
}

/// Instantiated norm with the per-sample gradient stored in `precision`.
pub fn psg_norm_instantiated_in(a: &Tensor, g: &Tensor, precision: Precision) -> Result<NormOutcome> {
    let (b, t, d, p) = check_pair(a, g)?;
    let acc = precision.default_accumulate();
    let lp = loss_precision(precision);
    let (ad, gd) = (a.data(), g.data());
    let mut overflow = false;
    let sq = (0..b)
        .map(|i| {
            let ai = &ad[i * t * d..(i + 1) * t * d];
            let gi = &gd[i * t * p..(i + 1) * t * p];
            let grad = gemm(d, p, t, |r, l| ai[l * d + r], |l, c| gi[l * p + c], acc, precision);
            overflow |= grad.iter().any(|x| !x.is_finite());
            grad.iter().fold(0.0, |s, &x| lp.round(s + x * x))
        })
        .collect();
    Ok(NormOutcome { sq, overflow })
}

/// `vec(a_i a_iᵀ) · vec(g_i g_iᵀ)` without materializing per-sample gradients.
pub fn psg_norm_ghost(a: &Tensor, g: &Tensor) -> Result<Vec<f64>> {
    Ok(psg_norm_ghost_in(a, g, Precision::F64)?.sq)
}

/// Per-sample Gram matrices `a_i a_iᵀ` and `g_i g_iᵀ` (each `T×T`, row-major)
/// computed in `precision` with the default accumulation.
pub fn ghost_grams(a: &Tensor, g: &Tensor, precision: Precision) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let (b, t, d, p) = check_pair(a, g)?;
    let acc = precision.default_accumulate();
    let (ad, gd) = (a.data(), g.data());
    Ok((0..b)
        .map(|i| {
            let ai = &ad[i * t * d..(i + 1) * t * d];
            let gi = &gd[i * t * p..(i + 1) * t * p];
            let aa = gemm(t, t, d, |r, l| ai[r * d + l], |l, c| ai[c * d + l], acc, precision);
            let gg = gemm(t, t, p, |r, l| gi[r * p + l], |l, c| gi[c * p + l], acc, precision);
            (aa, gg)
        })
        .collect())
}

/// Ghost norm with Gram matrices stored in `precision`.
pub fn psg_norm_ghost_in(a: &Tensor, g: &Tensor, precision: Precision) -> Result<NormOutcome> {
    let lp = loss_precision(precision);
    let mut overflow = false;
    let sq = ghost_grams(a, g, precision)?
        .into_iter()
        .map(|(aa, gg)| {
            overflow |= aa.iter().chain(&gg).any(|x| !x.is_finite());
            aa.iter().zip(&gg).fold(0.0, |s, (x, y)| lp.round(s + x * y))
        })
        .collect();
    Ok(NormOutcome { sq, overflow })
}

/// `‖Σ_t g_{i,t}‖²`, the squared norm of the per-sample bias gradient.
pub fn psg_norm_bias(g: &Tensor) -> Result<Vec<f64>> {
    Ok(psg_norm_bias_in(g, Precision::F64)?.sq)
}

pub fn psg_norm_bias_in(g: &Tensor, precision: Precision) -> Result<NormOutcome> {
    let (b, t, p) = g.dims3()?;
    let acc = precision.default_accumulate();
    let lp = loss_precision(precision);
    let gd = g.data();
    let mut overflow = false;
    let sq = (0..b)
        .map(|i| {
            let gi = &gd[i * t * p..(i + 1) * t * p];
            (0..p)
                .map(|c| {
                    let s = precision.round((0..t).fold(0.0, |s, tok| acc.round(s + gi[tok * p + c])));
                    overflow |= !s.is_finite();
                    s
                })
                .fold(0.0, |s, x| lp.round(s + x * x))
        })
        .collect();
    Ok(NormOutcome { sq, overflow })
}

/// Squared per-sample norms of one layer's trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorms {
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
    /// Method used for the weight norm, if the weight is trainable.
    pub method: Option<NormMethod>,
    pub overflow: bool,
}

/// Mixed ghost norm for a layer: dispatch for the weight, instantiation for the bias.
pub fn layer_sq_norms(
    a: &Tensor,
    g: &Tensor,
    trainable: Trainable,
    rule: DispatchRule,
    precision: Precision,
) -> Result<LayerNorms> {
    let (_, t, d, p) = check_pair(a, g)?;
    let mut overflow = false;
    let (weight, method) = if trainable.weight {
        let method = rule.choose(t, d, p);
        let out = match method {
            NormMethod::Ghost => psg_norm_ghost_in(a, g, precision)?,
            NormMethod::Instantiated => psg_norm_instantiated_in(a, g, precision)?,
        };
        overflow |= out.overflow;
        (Some(out.sq), Some(method))
    } else {
        (None, None)
    };
    let bias = if trainable.bias {
        let out = psg_norm_bias_in(g, precision)?;
        overflow |= out.overflow;
        Some(out.sq)
    } else {
        None
    };
    Ok(LayerNorms { weight, bias, method, overflow })
}

/// Sum member-layer squared norms per sample: layers ascending, weight
/// before bias, starting from zero.
pub fn aggregate_sq_norms<'a>(batch: usize, layers: impl IntoIterator<Item = &'a LayerNorms>, precision: Precision) -> Vec<f64> {
    let lp = loss_precision(precision);
    let mut total = vec![0.0; batch];
    for layer in layers {
        for part in [&layer.weight, &layer.bias].into_iter().flatten() {
            for (acc, &x) in total.iter_mut().zip(part) {
                *acc = lp.round(*acc + x);
            }
        }
    }
    total
}
