use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl OptimizerKind {
    /// Master-precision tensors kept per trainable parameter (master copy included).
    pub fn state_tensors(self) -> usize {
        match self {
            OptimizerKind::Sgd => 1,
            OptimizerKind::Adam | OptimizerKind::AdamW => 3,
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// L2 penalty added to the gradient for SGD/Adam, decoupled decay for AdamW.
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerSpec {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps(), weight_decay: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, ..Self::sgd(lr) }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::AdamW, weight_decay, ..Self::sgd(lr) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("optimizer.{field}"), msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas", "betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "weight decay must be nonnegative");
        }
        Ok(())
    }
}

/// Master weights and moments for a contiguous run of elements.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub master: Vec<f64>,
    pub momentum: Vec<f64>,
    pub variance: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, master: Vec<f64>) -> Self {
        let moments = if kind == OptimizerKind::Sgd { 0 } else { master.len() };
        Self { momentum: vec![0.0; moments], variance: vec![0.0; moments], master }
    }

    /// Elements allocated across all state tensors.
    pub fn allocated(&self) -> usize {
        self.master.len() + self.momentum.len() + self.variance.len()
    }

    /// Apply update number `t` (1-based) with gradient `grad`, every
    /// intermediate rounded to `precision`.
    pub fn update(&mut self, spec: &OptimizerSpec, grad: &[f64], t: u64, precision: Precision) {
        assert_eq!(grad.len(), self.master.len(), "gradient does not match optimizer state");
        let r = |x: f64| precision.round(x);
        match spec.kind {
            OptimizerKind::Sgd => {
                for (w, &g) in self.master.iter_mut().zip(grad) {
                    let g = r(g + r(spec.weight_decay * *w));
                    *w = r(*w - r(spec.lr * g));
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                let c1 = r(1.0 - spec.beta1.powi(t as i32));
                let c2 = r(1.0 - spec.beta2.powi(t as i32));
                let decoupled = spec.kind == OptimizerKind::AdamW;
                for i in 0..self.master.len() {
                    let w = self.master[i];
                    let g = if decoupled { grad[i] } else { r(grad[i] + r(spec.weight_decay * w)) };
                    let m = r(r(spec.beta1 * self.momentum[i]) + r((1.0 - spec.beta1) * g));
                    let v = r(r(spec.beta2 * self.variance[i]) + r((1.0 - spec.beta2) * r(g * g)));
                    self.momentum[i] = m;
                    self.variance[i] = v;
                    let step = r(r(m / c1) / r(r(r(v / c2).sqrt()) + spec.eps));
                    let mut next = r(w - r(spec.lr * step));
                    if decoupled {
                        next = r(next - r(spec.lr * r(spec.weight_decay * w)));
                    }
                    self.master[i] = next;
                }
            }
        }
    }
}
