//! Per-sample norms, clipping and Gaussian privatization.
//!
//! The private gradient of a micro-batch is
//! `Σ_i C_i(R_m) g_[m],i + σ‖[R_1, …, R_M]‖ · N(0, I)` with one clipping
//! factor per sample and group.

mod backward;
mod clip;
mod noise;
mod norms;

pub use backward::{clipped_grads, dp_backward, store_layer_grads, BackwardPass, BackwardReport, Clipping};
pub use clip::{clip_factors, ClipFunction, ClipPlan, Partition, PerSampleNorms, ResolvedClipPlan};
pub use noise::{privatize, NoiseMode, NoisePolicy};
pub use norms::{
    aggregate_sq_norms, ghost_dispatch, ghost_grams, layer_sq_norms, psg_norm_bias, psg_norm_bias_in, psg_norm_ghost,
    psg_norm_ghost_in, psg_norm_instantiated, psg_norm_instantiated_in, DispatchRule, LayerNorms, NormMethod,
    NormOutcome,
};

#[cfg(test)]
mod tests;
