//! Deterministic simulator and analytical cost model for differentially
//! private training with ZeRO-style model-state sharding.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: tensors on an `f64` carrier, fp16/bf16 value emulation, seeded streams.
//! * [`network`]: linear+bias layers, forward/backward, per-layer parameter gradients.
//! * [`dp`]: per-sample gradient norms (instantiated, ghost, mixed), clipping, noise.
//! * [`amp`]: loss-scaling step sequences with overflow/underflow tracking.
//! * [`zero`]: lockstep workers, collectives, ZeRO stages 0-3, optimizers, the training step.
//! * [`cost`]: closed-form flops, communication and memory model.
//! * [`config`] / [`sim`]: declarative run configs and trace emission.

pub mod amp;
pub mod config;
pub mod cost;
pub mod dp;
mod error;
pub mod network;
pub mod numerics;
pub mod sim;
pub mod zero;

pub use error::{Error, Result};
