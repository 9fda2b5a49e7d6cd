use serde::{Deserialize, Serialize};

use crate::network::{Batch, LossKind, NetworkSpec, Targets};
use crate::numerics::{gaussian, Purpose, RngStream, StreamId};

/// Synthetic data: Gaussian inputs with Gaussian regression targets or
/// uniform class labels, drawn per (step, micro-batch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub seed: u64,
    /// Standard deviation of inputs.
    #[serde(default = "one")]
    pub input_std: f64,
    /// Standard deviation of regression targets.
    #[serde(default = "one")]
    pub target_std: f64,
}

fn one() -> f64 {
    1.0
}

impl DataSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed, input_std: 1.0, target_std: 1.0 }
    }

    /// Micro-batch `index` of the logical batch at `step`.
    pub fn micro_batch(&self, spec: &NetworkSpec, size: usize, step: u64, index: usize) -> Batch {
        let base = RngStream::new(self.seed, StreamId::new(index as u64, Purpose::Data, step));
        let t = spec.tokens();
        let inputs = gaussian(&mut base.fork(0), vec![size, t, spec.input_dim()], self.input_std);
        let targets = match spec.loss {
            LossKind::SquaredError => {
                Targets::Regression(gaussian(&mut base.fork(1), vec![size, t, spec.output_dim()], self.target_std))
            }
            LossKind::CrossEntropy => {
                let mut rng = base.fork(1);
                Targets::Classes((0..size * t).map(|_| rng.below(spec.output_dim())).collect())
            }
        };
        Batch { inputs, targets }
    }
}
