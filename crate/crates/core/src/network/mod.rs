//! Feed-forward stacks of linear+bias layers.
//!
//! Activations are `[B, T, d]` tensors. Layer `l` computes
//! `s_l = a_l W_l + b_l` and `a_{l+1} = φ_l(s_l)`. Backward works on the
//! output gradients `∂L/∂s_l`, from which parameter gradients are assembled
//! as `a_lᵀ diag(scale) ∂L/∂s_l`, so standard and clipped gradients share
//! one code path.

mod spec;

pub use spec::{Activation, LayerSpec, LossKind, NetworkSpec, ParamKind, ParamTensorInfo, Trainable};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian, Precision, Purpose, RngStream, StreamId, Tensor};

/// Weight `[d_in, d_out]` and bias `[d_out]` of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn round_to(&self, p: Precision) -> LayerParams {
        LayerParams { weight: self.weight.round_to(p), bias: self.bias.round_to(p) }
    }

    pub fn tensor(&self, kind: ParamKind) -> &Tensor {
        match kind {
            ParamKind::Weight => &self.weight,
            ParamKind::Bias => &self.bias,
        }
    }
}

/// Gaussian initialisation: `W ~ N(0, 1/d_in)`, `b ~ N(0, 0.01)`.
pub fn init_params(spec: &NetworkSpec, seed: u64, precision: Precision) -> Vec<LayerParams> {
    spec.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let base = RngStream::new(seed, StreamId::new(l as u64, Purpose::Init, 0));
            let w_std = 1.0 / (layer.d_in as f64).sqrt();
            let weight = gaussian(&mut base.fork(0), vec![layer.d_in, layer.d_out], w_std);
            let bias = gaussian(&mut base.fork(1), vec![layer.d_out], 0.1);
            LayerParams { weight: weight.round_to(precision), bias: bias.round_to(precision) }
        })
        .collect()
}

/// Flatten parameters into the canonical tensor order of
/// [`NetworkSpec::param_tensors`].
pub fn flatten_params(params: &[LayerParams]) -> Vec<Vec<f64>> {
    params
        .iter()
        .flat_map(|p| [p.weight.data().to_vec(), p.bias.data().to_vec()])
        .collect()
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(spec: &NetworkSpec, flat: &[Vec<f64>], precision: Precision) -> Result<Vec<LayerParams>> {
    if flat.len() != 2 * spec.num_layers() {
        return Err(Error::contract(format!(
            "expected {} parameter tensors, got {}",
            2 * spec.num_layers(),
            flat.len()
        )));
    }
    spec.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            Ok(LayerParams {
                weight: Tensor::new(vec![layer.d_in, layer.d_out], flat[2 * l].clone(), precision)?,
                bias: Tensor::new(vec![layer.d_out], flat[2 * l + 1].clone(), precision)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Targets {
    /// `[B, T, p_out]`
    Regression(Tensor),
    /// One class index per token, `B·T` entries.
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.shape()[0]
    }

    /// Samples `[start, start + len)` as their own batch.
    pub fn slice(&self, start: usize, len: usize) -> Result<Batch> {
        let (b, t, d) = self.inputs.dims3()?;
        if start + len > b {
            return Err(Error::contract(format!("slice {start}+{len} exceeds batch of {b}")));
        }
        let p = self.inputs.precision();
        let inputs = Tensor::new(vec![len, t, d], self.inputs.data()[start * t * d..(start + len) * t * d].to_vec(), p)?;
        let targets = match &self.targets {
            Targets::Regression(y) => {
                let (_, ty, k) = y.dims3()?;
                let data = y.data()[start * ty * k..(start + len) * ty * k].to_vec();
                Targets::Regression(Tensor::new(vec![len, ty, k], data, y.precision())?)
            }
            Targets::Classes(c) => Targets::Classes(c[start * t..(start + len) * t].to_vec()),
        };
        Ok(Batch { inputs, targets })
    }
}

/// Stored activations of one forward pass.
///
/// `inputs[l]` is `a_l`, the input of layer `l`; `output` is the network
/// output. Pre-activations `s_l` are kept unless checkpointing is on, in
/// which case they are recomputed from `a_l` on demand.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    inputs: Vec<Tensor>,
    pre: Vec<Option<Tensor>>,
    output: Option<Tensor>,
    checkpointing: bool,
    precision: Precision,
}

impl ActivationCache {
    pub fn new(input: Tensor, checkpointing: bool, precision: Precision) -> Self {
        Self {
            inputs: vec![input.round_to(precision)],
            pre: Vec::new(),
            output: None,
            checkpointing,
            precision,
        }
    }

    pub fn checkpointing(&self) -> bool {
        self.checkpointing
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Layers already forwarded.
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    /// Run layer `depth()` and record its activations.
    pub fn forward_layer(&mut self, layer: &LayerSpec, params: &LayerParams) -> Result<()> {
        let l = self.pre.len();
        let a = &self.inputs[l];
        let s = pre_activation(a, params, self.precision)?;
        let next = s.map(|x| layer.activation.apply(x));
        self.pre.push(if self.checkpointing { None } else { Some(s) });
        self.output = Some(next.clone());
        self.inputs.push(next);
        Ok(())
    }

    /// Input `a_l` of layer `l`.
    pub fn input(&self, l: usize) -> Result<&Tensor> {
        if l >= self.pre.len() {
            return Err(Error::contract(format!("no cached activation for layer {l}")));
        }
        Ok(&self.inputs[l])
    }

    /// `s_l`, recomputed from `a_l` when checkpointing dropped it.
    pub fn pre_activation(&self, l: usize, params: &LayerParams) -> Result<Tensor> {
        match self.pre.get(l) {
            Some(Some(s)) => Ok(s.clone()),
            Some(None) => pre_activation(&self.inputs[l], params, self.precision),
            None => Err(Error::contract(format!("layer {l} was never forwarded"))),
        }
    }

    pub fn output(&self) -> Result<&Tensor> {
        self.output.as_ref().ok_or_else(|| Error::contract("forward pass has not run"))
    }

    /// Elements held by the cache.
    pub fn stored_elements(&self) -> usize {
        self.inputs.iter().map(Tensor::len).sum::<usize>()
            + self.pre.iter().flatten().map(Tensor::len).sum::<usize>()
    }
}

/// `s = a W + b` over a `[B, T, d]` activation.
pub fn pre_activation(a: &Tensor, params: &LayerParams, precision: Precision) -> Result<Tensor> {
    let (b, t, d) = a.dims3()?;
    let (d_w, p) = params.weight.dims2()?;
    if d != d_w || params.bias.len() != p {
        return Err(Error::ShapeMismatch {
            op: "pre_activation",
            left: a.shape().to_vec(),
            right: params.weight.shape().to_vec(),
        });
    }
    let flat = a.clone().reshape(vec![b * t, d])?;
    let acc = precision.default_accumulate();
    let prod = flat.matmul(&params.weight, acc, precision)?;
    let bias = params.bias.data();
    let data: Vec<f64> = prod
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| precision.round(x + bias[i % p]))
        .collect();
    Tensor::new(vec![b, t, p], data, precision)
}

/// Forward pass over the whole network.
///
/// Returns per-sample losses `L_i` (computed in F32 for half precision,
/// otherwise in `precision`) and the activation cache.
pub fn forward(
    spec: &NetworkSpec,
    params: &[LayerParams],
    batch: &Batch,
    precision: Precision,
    checkpointing: bool,
) -> Result<(Tensor, ActivationCache)> {
    check_input(spec, &batch.inputs)?;
    if params.len() != spec.num_layers() {
        return Err(Error::contract("parameter count does not match layer count"));
    }
    let mut cache = ActivationCache::new(batch.inputs.clone(), checkpointing, precision);
    for (layer, p) in spec.layers.iter().zip(params) {
        cache.forward_layer(layer, &p.round_to(precision))?;
    }
    let (losses, _) = loss_and_grad(spec.loss, cache.output()?, &batch.targets, 1.0, precision)?;
    if precision == Precision::F64 && !losses.all_finite() {
        return Err(Error::NumericFault("non-finite per-sample loss".into()));
    }
    Ok((losses, cache))
}

pub fn check_input(spec: &NetworkSpec, x: &Tensor) -> Result<()> {
    let (_, t, d) = x.dims3()?;
    if d != spec.input_dim() || t != spec.tokens() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: x.shape().to_vec(),
            right: vec![0, spec.tokens(), spec.input_dim()],
        });
    }
    Ok(())
}

/// Precision losses and loss gradients are evaluated in.
pub fn loss_precision(precision: Precision) -> Precision {
    if precision.is_half() {
        Precision::F32
    } else {
        precision
    }
}

/// Per-sample losses and `scale · ∂L/∂y` with respect to the network output `y`.
///
/// The scaled gradient is formed in the loss precision and then rounded to
/// `precision`, which is where fp16 underflow (or overflow under a large
/// scale) first appears.
pub fn loss_and_grad(
    loss: LossKind,
    output: &Tensor,
    targets: &Targets,
    scale: f64,
    precision: Precision,
) -> Result<(Tensor, Tensor)> {
    let (b, t, k) = output.dims3()?;
    let lp = loss_precision(precision);
    let y = output.data();
    let mut losses = vec![0.0; b];
    let mut grad = vec![0.0; b * t * k];
    match (loss, targets) {
        (LossKind::SquaredError, Targets::Regression(_)) | (LossKind::CrossEntropy, Targets::Classes(_)) => {}
        _ => return Err(Error::contract(format!("{loss:?} loss does not accept these targets"))),
    }
    match targets {
        Targets::Regression(target) => {
            if target.shape() != output.shape() {
                return Err(Error::ShapeMismatch {
                    op: "loss",
                    left: output.shape().to_vec(),
                    right: target.shape().to_vec(),
                });
            }
            let tgt = target.data();
            for i in 0..b {
                let mut acc = 0.0;
                for j in i * t * k..(i + 1) * t * k {
                    let r = lp.round(y[j] - lp.round(tgt[j]));
                    acc = lp.round(acc + lp.round(0.5 * r * r));
                    grad[j] = precision.round(lp.round(scale * r));
                }
                losses[i] = acc;
            }
        }
        Targets::Classes(labels) => {
            if labels.len() != b * t {
                return Err(Error::ShapeMismatch { op: "loss", left: vec![b, t], right: vec![labels.len()] });
            }
            for i in 0..b {
                let mut acc = 0.0;
                for tok in 0..t {
                    let row = (i * t + tok) * k;
                    let label = labels[i * t + tok];
                    if label >= k {
                        return Err(Error::contract(format!("class label {label} out of range for {k} outputs")));
                    }
                    let logits = &y[row..row + k];
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
                    let lse = max + denom.ln();
                    acc = lp.round(acc + lp.round(lse - logits[label]));
                    for c in 0..k {
                        let prob = ((logits[c] - max).exp() / denom) - if c == label { 1.0 } else { 0.0 };
                        grad[row + c] = precision.round(lp.round(scale * lp.round(prob)));
                    }
                }
                losses[i] = acc;
            }
        }
    }
    Ok((Tensor::new(vec![b], losses, lp)?, Tensor::new(vec![b, t, k], grad, precision)?))
}

/// `∂L/∂s_l = ∂L/∂a_{l+1} ∘ φ'_l(s_l)`
pub fn layer_output_grad(upstream: &Tensor, pre: &Tensor, activation: Activation, precision: Precision) -> Result<Tensor> {
    upstream
        .round_to(precision)
        .zip_map(pre, |g, s| g * activation.derivative(s))
}

/// `∂L/∂a_l = ∂L/∂s_l W_lᵀ`, the upstream gradient for layer `l - 1`.
pub fn layer_input_grad(grad_s: &Tensor, weight: &Tensor, precision: Precision) -> Result<Tensor> {
    let (b, t, p) = grad_s.dims3()?;
    let (d, p_w) = weight.dims2()?;
    if p != p_w {
        return Err(Error::ShapeMismatch {
            op: "layer_input_grad",
            left: grad_s.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let flat = grad_s.clone().reshape(vec![b * t, p])?;
    flat.matmul_nt(weight, precision.default_accumulate(), precision)?
        .reshape(vec![b, t, d])
}

/// Output gradients `∂L/∂s_l` for every layer, given `∂L/∂y` at the output.
pub fn backward_output_grads(
    spec: &NetworkSpec,
    params: &[LayerParams],
    cache: &ActivationCache,
    output_grad: &Tensor,
) -> Result<Vec<Tensor>> {
    let n = spec.num_layers();
    if cache.depth() != n || params.len() != n {
        return Err(Error::contract("backward requires a complete forward cache"));
    }
    let p = cache.precision();
    let mut grads: Vec<Tensor> = Vec::with_capacity(n);
    let mut upstream = output_grad.clone();
    for l in (0..n).rev() {
        let lp = params[l].round_to(p);
        let s = cache.pre_activation(l, &lp)?;
        let g = layer_output_grad(&upstream, &s, spec.layers[l].activation, p)?;
        if l > 0 {
            upstream = layer_input_grad(&g, &lp.weight, p)?;
        }
        grads.push(g);
    }
    grads.reverse();
    Ok(grads)
}

/// Parameter gradients `a_lᵀ diag(scale) ∂L/∂s_l` and `Σ_{i,t} scale_i ∂L/∂s_{l,i,t}`.
///
/// `scale` holds one factor per sample; all ones gives the standard summed
/// gradient and a one-hot vector selects a single per-sample gradient.
pub fn param_grad(a: &Tensor, grad_s: &Tensor, scale: &[f64], precision: Precision) -> Result<(Tensor, Tensor)> {
    let (b, t, d) = a.dims3()?;
    let (b2, t2, p) = grad_s.dims3()?;
    if b != b2 || t != t2 || scale.len() != b {
        return Err(Error::ShapeMismatch {
            op: "param_grad",
            left: a.shape().to_vec(),
            right: grad_s.shape().to_vec(),
        });
    }
    let g = grad_s.data();
    let scaled: Vec<f64> = (0..b * t * p).map(|j| precision.round(g[j] * scale[j / (t * p)])).collect();
    let scaled = Tensor::new(vec![b * t, p], scaled, precision)?;
    let acc = precision.default_accumulate();
    let a_flat = a.clone().reshape(vec![b * t, d])?;
    let gw = a_flat.matmul_tn(&scaled, acc, precision)?;
    let sd = scaled.data();
    let gb: Vec<f64> = (0..p)
        .map(|q| {
            let mut sum = 0.0;
            for row in 0..b * t {
                sum = acc.round(sum + sd[row * p + q]);
            }
            precision.round(sum)
        })
        .collect();
    Ok((gw, Tensor::new(vec![p], gb, precision)?))
}

#[cfg(test)]
mod tests;
