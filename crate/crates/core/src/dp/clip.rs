use serde::{Deserialize, Serialize};

use super::norms::{aggregate_sq_norms, LayerNorms, NormMethod};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::numerics::Precision;

/// How trainable layers are grouped for clipping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    /// One group holding every trainable parameter.
    AllLayer,
    /// One group per trainable layer.
    LayerWise,
    /// Explicit group index for each trainable layer, in layer order.
    Groups(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ClipFunction {
    /// `C = min(R / ‖g‖, 1)`
    Vanilla,
    /// `C = R / (‖g‖ + γ)`
    Automatic { gamma: f64 },
}

impl ClipFunction {
    pub const DEFAULT_GAMMA: f64 = 0.01;

    pub fn automatic() -> Self {
        ClipFunction::Automatic { gamma: Self::DEFAULT_GAMMA }
    }

    /// Clipping factor for a sample with squared group norm `sq_norm` and threshold `r`.
    #[inline]
    pub fn factor(self, sq_norm: f64, r: f64) -> f64 {
        let norm = sq_norm.sqrt();
        match self {
            ClipFunction::Vanilla => {
                if norm == 0.0 {
                    1.0
                } else {
                    (r / norm).min(1.0)
                }
            }
            ClipFunction::Automatic { gamma } => r / (norm + gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub partition: Partition,
    pub function: ClipFunction,
    /// One threshold per group, or a single value shared by all groups.
    pub thresholds: Vec<f64>,
}

impl ClipPlan {
    pub fn new(partition: Partition, function: ClipFunction, thresholds: Vec<f64>) -> Self {
        Self { partition, function, thresholds }
    }

    pub fn layer_wise(function: ClipFunction, r: f64) -> Self {
        Self::new(Partition::LayerWise, function, vec![r])
    }

    pub fn all_layer(function: ClipFunction, r: f64) -> Self {
        Self::new(Partition::AllLayer, function, vec![r])
    }

    /// Bind the plan to a network's trainable layers.
    pub fn resolve(&self, spec: &NetworkSpec) -> Result<ResolvedClipPlan> {
        let trainable = spec.trainable_layers();
        let mut group_of_layer = vec![None; spec.num_layers()];
        let groups = match &self.partition {
            Partition::AllLayer => {
                for &l in &trainable {
                    group_of_layer[l] = Some(0);
                }
                usize::from(!trainable.is_empty())
            }
            Partition::LayerWise => {
                for (m, &l) in trainable.iter().enumerate() {
                    group_of_layer[l] = Some(m);
                }
                trainable.len()
            }
            Partition::Groups(ids) => {
                if ids.len() != trainable.len() {
                    return Err(Error::config(
                        "clipping.partition",
                        format!("{} group ids given for {} trainable layers", ids.len(), trainable.len()),
                    ));
                }
                let m = ids.iter().max().map_or(0, |&x| x + 1);
                for g in 0..m {
                    if !ids.contains(&g) {
                        return Err(Error::config("clipping.partition", format!("group {g} has no layers")));
                    }
                }
                for (&l, &g) in trainable.iter().zip(ids) {
                    group_of_layer[l] = Some(g);
                }
                m
            }
        };
        let thresholds = match self.thresholds.len() {
            1 => vec![self.thresholds[0]; groups],
            n if n == groups => self.thresholds.clone(),
            n => {
                return Err(Error::config("clipping.R", format!("expected 1 or {groups} thresholds, got {n}")));
            }
        };
        if let Some(r) = thresholds.iter().find(|r| !(**r > 0.0)) {
            return Err(Error::config("clipping.R", format!("thresholds must be positive, got {r}")));
        }
        if let ClipFunction::Automatic { gamma } = self.function {
            if !(gamma > 0.0) {
                return Err(Error::config("clipping.gamma", "gamma must be positive"));
            }
        }
        Ok(ResolvedClipPlan { group_of_layer, thresholds, function: self.function })
    }
}

/// A [`ClipPlan`] bound to a concrete network.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedClipPlan {
    /// Group of each layer; `None` for fully frozen layers.
    pub group_of_layer: Vec<Option<usize>>,
    pub thresholds: Vec<f64>,
    pub function: ClipFunction,
}

impl ResolvedClipPlan {
    pub fn num_groups(&self) -> usize {
        self.thresholds.len()
    }

    /// Layers of group `m`, ascending.
    pub fn members(&self, m: usize) -> Vec<usize> {
        (0..self.group_of_layer.len()).filter(|&l| self.group_of_layer[l] == Some(m)).collect()
    }

    /// True when every group holds exactly one layer, so clipping factors
    /// are available as soon as that layer's output gradient exists.
    pub fn is_layer_local(&self) -> bool {
        (0..self.num_groups()).all(|m| self.members(m).len() == 1)
    }

    /// `‖[R_1, …, R_M]‖`
    pub fn threshold_norm(&self) -> f64 {
        self.thresholds.iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    /// Copy with every threshold multiplied by `s`.
    pub fn scaled(&self, s: f64) -> ResolvedClipPlan {
        ResolvedClipPlan {
            thresholds: self.thresholds.iter().map(|r| r * s).collect(),
            ..self.clone()
        }
    }
}

/// Squared per-sample norms for every clipping group.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleNorms {
    /// `sq[i][m]`
    pub sq: Vec<Vec<f64>>,
    /// Weight-norm method per layer (`None` when the weight is frozen).
    pub methods: Vec<Option<NormMethod>>,
}

impl PerSampleNorms {
    /// Aggregate per-layer norms into group norms.
    pub fn from_layers(plan: &ResolvedClipPlan, layers: &[Option<LayerNorms>], batch: usize, precision: Precision) -> Self {
        let mut sq = vec![vec![0.0; plan.num_groups()]; batch];
        for m in 0..plan.num_groups() {
            let members = plan.members(m);
            let group = aggregate_sq_norms(batch, members.iter().filter_map(|&l| layers[l].as_ref()), precision);
            for (row, v) in sq.iter_mut().zip(group) {
                row[m] = v;
            }
        }
        let methods = layers.iter().map(|l| l.as_ref().and_then(|n| n.method)).collect();
        Self { sq, methods }
    }
}

/// Per-sample, per-group clipping factors `C_i(R_m)`, shape `[B][M]`.
pub fn clip_factors(norms: &PerSampleNorms, plan: &ResolvedClipPlan) -> Result<Vec<Vec<f64>>> {
    norms
        .sq
        .iter()
        .map(|row| {
            if row.len() != plan.num_groups() {
                return Err(Error::contract("norms do not cover every clipping group"));
            }
            row.iter()
                .zip(&plan.thresholds)
                .map(|(&sq, &r)| {
                    if sq < 0.0 || sq.is_nan() {
                        Err(Error::contract(format!("negative squared norm {sq}")))
                    } else {
                        Ok(plan.function.factor(sq, r))
                    }
                })
                .collect()
        })
        .collect()
}
