use super::clip::{clip_factors, PerSampleNorms, ResolvedClipPlan};
use super::norms::{aggregate_sq_norms, layer_sq_norms, DispatchRule, LayerNorms};
use crate::error::{Error, Result};
use crate::network::{
    layer_input_grad, layer_output_grad, loss_precision, param_grad, ActivationCache, LayerParams, NetworkSpec,
};
use crate::numerics::Tensor;

/// Clipping configuration for a DP backward pass.
#[derive(Debug, Clone, Copy)]
pub struct Clipping<'a> {
    pub plan: &'a ResolvedClipPlan,
    pub rule: DispatchRule,
}

/// Side information gathered during a DP backward pass.
#[derive(Debug, Clone, Default)]
pub struct BackwardReport {
    /// Group norms `[B][M]`, filled only when clipping.
    pub norms: Option<PerSampleNorms>,
    /// Clipping factors `[B][M]`, filled only when clipping.
    pub factors: Option<Vec<Vec<f64>>>,
    /// An infinity appeared in an output gradient, a norm intermediate or a parameter gradient.
    pub overflow: bool,
}

/// Layer-by-layer backward producing parameter gradients `a_lᵀ diag(C) ∂L/∂s_l`.
///
/// Call [`BackwardPass::layer`] for every layer from the last to the first,
/// then [`BackwardPass::finish`]. Gradients are handed to `emit(l, gW, gb)`
/// for trainable layers only.
///
/// When every clipping group is a single layer the factors are applied as
/// soon as that layer's output gradient exists and nothing is retained.
/// Otherwise output gradients are kept until all group norms are known and
/// parameter gradients are formed in `finish`, deepest layer first.
pub struct BackwardPass<'a> {
    spec: &'a NetworkSpec,
    cache: &'a ActivationCache,
    clipping: Option<Clipping<'a>>,
    streaming: bool,
    batch: usize,
    next: usize,
    upstream: Tensor,
    kept: Vec<Option<Tensor>>,
    layer_norms: Vec<Option<LayerNorms>>,
    stream_factors: Vec<Vec<f64>>,
    report: BackwardReport,
}

impl<'a> BackwardPass<'a> {
    pub fn new(
        spec: &'a NetworkSpec,
        cache: &'a ActivationCache,
        output_grad: &Tensor,
        clipping: Option<Clipping<'a>>,
    ) -> Result<Self> {
        let n = spec.num_layers();
        if cache.depth() != n {
            return Err(Error::contract("backward requires a complete forward cache"));
        }
        let batch = output_grad.dims3()?.0;
        let groups = clipping.map_or(0, |c| c.plan.num_groups());
        Ok(Self {
            spec,
            cache,
            clipping,
            streaming: clipping.is_none_or(|c| c.plan.is_layer_local()),
            batch,
            next: n,
            upstream: output_grad.clone(),
            kept: vec![None; n],
            layer_norms: vec![None; n],
            stream_factors: vec![vec![0.0; groups]; batch],
            report: BackwardReport { overflow: output_grad.has_infinity(), ..Default::default() },
        })
    }

    /// Layer whose parameters the next [`BackwardPass::layer`] call needs.
    pub fn next_layer(&self) -> Option<usize> {
        self.next.checked_sub(1)
    }

    pub fn layer(&mut self, params: &LayerParams, mut emit: impl FnMut(usize, Tensor, Tensor) -> Result<()>) -> Result<()> {
        let l = self.next_layer().ok_or_else(|| Error::contract("backward already reached the first layer"))?;
        self.next = l;
        let p = self.cache.precision();
        let layer = &self.spec.layers[l];
        let params = params.round_to(p);
        let s = self.cache.pre_activation(l, &params)?;
        let g = layer_output_grad(&self.upstream, &s, layer.activation, p)?;
        self.report.overflow |= g.has_infinity();
        if l > 0 {
            self.upstream = layer_input_grad(&g, &params.weight, p)?;
        }
        if !layer.trainable.any() {
            return Ok(());
        }
        let a = self.cache.input(l)?;
        let Some(clip) = self.clipping else {
            self.report.overflow |= emit_layer(l, a, &g, &vec![1.0; self.batch], &mut emit)?;
            return Ok(());
        };
        let norms = layer_sq_norms(a, &g, layer.trainable, clip.rule, p)?;
        self.report.overflow |= norms.overflow;
        if self.streaming {
            let m = group_of(clip.plan, l)?;
            let lp = loss_precision(p);
            let sq = aggregate_sq_norms(self.batch, [&norms], p);
            let r = clip.plan.thresholds[m];
            let scale: Vec<f64> = sq.iter().map(|&x| lp.round(clip.plan.function.factor(x, r))).collect();
            for (row, &c) in self.stream_factors.iter_mut().zip(&scale) {
                row[m] = c;
            }
            self.report.overflow |= emit_layer(l, a, &g, &scale, &mut emit)?;
        } else {
            self.kept[l] = Some(g);
        }
        self.layer_norms[l] = Some(norms);
        Ok(())
    }

    pub fn finish(mut self, mut emit: impl FnMut(usize, Tensor, Tensor) -> Result<()>) -> Result<BackwardReport> {
        if self.next != 0 {
            return Err(Error::contract(format!("backward stopped before layer {}", self.next - 1)));
        }
        let Some(clip) = self.clipping else {
            return Ok(self.report);
        };
        let p = self.cache.precision();
        let norms = PerSampleNorms::from_layers(clip.plan, &self.layer_norms, self.batch, p);
        let factors = if self.streaming {
            std::mem::take(&mut self.stream_factors)
        } else {
            let lp = loss_precision(p);
            let factors: Vec<Vec<f64>> = clip_factors(&norms, clip.plan)?
                .into_iter()
                .map(|row| row.into_iter().map(|c| lp.round(c)).collect())
                .collect();
            for l in (0..self.spec.num_layers()).rev() {
                let Some(g) = self.kept[l].take() else { continue };
                let m = group_of(clip.plan, l)?;
                let scale: Vec<f64> = factors.iter().map(|row| row[m]).collect();
                self.report.overflow |= emit_layer(l, self.cache.input(l)?, &g, &scale, &mut emit)?;
            }
            factors
        };
        self.report.norms = Some(norms);
        self.report.factors = Some(factors);
        Ok(self.report)
    }
}

fn group_of(plan: &ResolvedClipPlan, l: usize) -> Result<usize> {
    plan.group_of_layer[l].ok_or_else(|| Error::contract(format!("trainable layer {l} is outside every group")))
}

fn emit_layer(
    l: usize,
    a: &Tensor,
    g: &Tensor,
    scale: &[f64],
    emit: &mut impl FnMut(usize, Tensor, Tensor) -> Result<()>,
) -> Result<bool> {
    let (gw, gb) = param_grad(a, g, scale, g.precision())?;
    let overflow = gw.has_infinity() || gb.has_infinity();
    emit(l, gw, gb)?;
    Ok(overflow)
}

/// Run a whole [`BackwardPass`], asking `fetch(l)` for each layer's parameters.
pub fn dp_backward(
    spec: &NetworkSpec,
    cache: &ActivationCache,
    output_grad: &Tensor,
    clipping: Option<Clipping<'_>>,
    mut fetch: impl FnMut(usize) -> Result<LayerParams>,
    mut emit: impl FnMut(usize, Tensor, Tensor) -> Result<()>,
) -> Result<BackwardReport> {
    let mut pass = BackwardPass::new(spec, cache, output_grad, clipping)?;
    while let Some(l) = pass.next_layer() {
        pass.layer(&fetch(l)?, &mut emit)?;
    }
    pass.finish(emit)
}

/// Single-device DP backward over full parameters, returning gradients in
/// canonical tensor order (`None` for frozen tensors).
pub fn clipped_grads(
    spec: &NetworkSpec,
    params: &[LayerParams],
    cache: &ActivationCache,
    output_grad: &Tensor,
    clipping: Option<Clipping<'_>>,
) -> Result<(Vec<Option<Tensor>>, BackwardReport)> {
    let mut grads: Vec<Option<Tensor>> = vec![None; 2 * spec.num_layers()];
    let report = dp_backward(
        spec,
        cache,
        output_grad,
        clipping,
        |l| params.get(l).cloned().ok_or_else(|| Error::contract(format!("missing parameters for layer {l}"))),
        |l, gw, gb| {
            store_layer_grads(spec, &mut grads, l, gw, gb);
            Ok(())
        },
    )?;
    Ok((grads, report))
}

/// Place a layer's gradients at their canonical indices, dropping frozen ones.
pub fn store_layer_grads(spec: &NetworkSpec, grads: &mut [Option<Tensor>], l: usize, gw: Tensor, gb: Tensor) {
    let t = spec.layers[l].trainable;
    if t.weight {
        grads[2 * l] = Some(gw);
    }
    if t.bias {
        grads[2 * l + 1] = Some(gb);
    }
}
