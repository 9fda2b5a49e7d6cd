use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Identity => s,
            Activation::Relu => {
                if s > 0.0 {
                    s
                } else {
                    0.0
                }
            }
            Activation::Tanh => s.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation `s`.
    #[inline]
    pub fn derivative(self, s: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = s.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Which of a layer's parameter tensors receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub weight: bool,
    pub bias: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self { weight: true, bias: true }
    }
}

impl Trainable {
    pub const FROZEN: Trainable = Trainable { weight: false, bias: false };

    pub fn any(self) -> bool {
        self.weight || self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
    #[serde(default)]
    pub trainable: Trainable,
    /// Token length `T` of this layer's input.
    pub tokens: usize,
}

impl LayerSpec {
    pub fn new(d_in: usize, d_out: usize, activation: Activation, tokens: usize) -> Self {
        Self { d_in, d_out, activation, trainable: Trainable::default(), tokens }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = Trainable::FROZEN;
        self
    }

    pub fn with_trainable(mut self, trainable: Trainable) -> Self {
        self.trainable = trainable;
        self
    }

    pub fn weight_len(&self) -> usize {
        self.d_in * self.d_out
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.d_out
    }

    pub fn trainable_count(&self) -> usize {
        let w = if self.trainable.weight { self.weight_len() } else { 0 };
        let b = if self.trainable.bias { self.d_out } else { 0 };
        w + b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `L_i = ½ Σ_{t,k} (y_{i,t,k} - target_{i,t,k})²`
    SquaredError,
    /// Softmax cross-entropy summed over a sample's tokens.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// One parameter tensor in canonical order (layer-major, weight before bias).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamTensorInfo {
    pub index: usize,
    pub layer: usize,
    pub kind: ParamKind,
    pub len: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, loss: LossKind) -> Result<Self> {
        let spec = Self { layers, loss };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("network.layers", "at least one layer is required"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let path = format!("network.layers[{l}]");
            if layer.d_in == 0 || layer.d_out == 0 {
                return Err(Error::config(path, "layer dimensions must be positive"));
            }
            if layer.tokens == 0 {
                return Err(Error::config(format!("{path}.tokens"), "token length must be positive"));
            }
            if l > 0 {
                let prev = &self.layers[l - 1];
                if prev.d_out != layer.d_in {
                    return Err(Error::config(
                        format!("{path}.d_in"),
                        format!("expected {} to match previous layer's d_out", prev.d_out),
                    ));
                }
                if prev.tokens != layer.tokens {
                    return Err(Error::config(
                        format!("{path}.tokens"),
                        "linear layers preserve token length",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.d_out).unwrap_or(0)
    }

    pub fn tokens(&self) -> usize {
        self.layers[0].tokens
    }

    /// Ψ_model: every parameter, frozen or not.
    pub fn psi_model(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Ψ_train: parameters under the trainable mask.
    pub fn psi_train(&self) -> usize {
        self.layers.iter().map(LayerSpec::trainable_count).sum()
    }

    pub fn param_tensors(&self) -> Vec<ParamTensorInfo> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(ParamTensorInfo {
                index: 2 * l,
                layer: l,
                kind: ParamKind::Weight,
                len: layer.weight_len(),
                trainable: layer.trainable.weight,
            });
            out.push(ParamTensorInfo {
                index: 2 * l + 1,
                layer: l,
                kind: ParamKind::Bias,
                len: layer.d_out,
                trainable: layer.trainable.bias,
            });
        }
        out
    }

    /// Layers with at least one trainable tensor, in ascending order.
    pub fn trainable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.layers[l].trainable.any()).collect()
    }
}
