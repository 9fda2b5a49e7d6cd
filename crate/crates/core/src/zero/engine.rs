use serde::{Deserialize, Serialize};

use super::collective::{CallSite, CollectiveLog, Communicator};
use super::data::DataSpec;
use super::optim::{OptimizerSpec, OptimizerState};
use super::shard::{Region, ShardPlan, Stage};
use crate::amp::{run_pipeline, FlowStatus, PipelineInputs, ScalingPipeline};
use crate::dp::{privatize, store_layer_grads, BackwardPass, ClipPlan, Clipping, DispatchRule, NoisePolicy, ResolvedClipPlan};
use crate::error::{Error, Result};
use crate::network::{
    flatten_params, init_params, loss_and_grad, unflatten_params, ActivationCache, LayerParams, NetworkSpec,
};
use crate::numerics::{Precision, Purpose, RngStream, StreamId, Tensor};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub spec: NetworkSpec,
    pub data: DataSpec,
    pub stage: Stage,
    pub workers: usize,
    /// Per-worker micro-batch size `B`.
    pub micro_batch: usize,
    /// Micro-batches each worker processes per optimizer step.
    pub accumulation: usize,
    pub clip: ClipPlan,
    pub noise: NoisePolicy,
    pub optimizer: OptimizerSpec,
    pub amp: ScalingPipeline,
    pub precision: Precision,
    pub checkpointing: bool,
    pub dispatch: DispatchRule,
    /// Seeds initialization and noise.
    pub seed: u64,
}

impl TrainSetup {
    /// Micro-batches per optimizer step across all workers.
    pub fn micro_batches(&self) -> usize {
        self.workers * self.accumulation
    }

    pub fn logical_batch(&self) -> usize {
        self.micro_batch * self.micro_batches()
    }

    /// Same run on a single device with the same logical batch, split into
    /// the same micro-batches.
    pub fn single_device(&self) -> TrainSetup {
        TrainSetup { stage: Stage::Ddp, workers: 1, accumulation: self.micro_batches(), ..self.clone() }
    }

    pub(crate) fn prepare(&self) -> Result<Prepared> {
        self.spec.validate()?;
        self.optimizer.validate()?;
        self.amp.validate()?;
        if self.workers == 0 {
            return Err(Error::config("shard.workers", "at least one worker is required"));
        }
        if self.micro_batch == 0 {
            return Err(Error::config("data.micro_batch", "micro-batch size must be positive"));
        }
        if self.accumulation == 0 {
            return Err(Error::config("accumulation_steps", "must be positive"));
        }
        if !(self.noise.sigma >= 0.0 && self.noise.sigma.is_finite()) {
            return Err(Error::config("noise.sigma", "sigma must be finite and nonnegative"));
        }
        let variant = self.amp.variant;
        let s = if variant.scales_loss() { self.amp.scale } else { 1.0 };
        let privacy = if variant.is_private() {
            let base = self.clip.resolve(&self.spec)?;
            if !base.is_layer_local() && self.stage.shards_grads() {
                return Err(Error::Unsupported(format!(
                    "clipping groups spanning several layers need every output gradient of a sample before any \
                     gradient is reduced; stage {} only supports one layer per group",
                    self.stage
                )));
            }
            let plan = if variant.scales_threshold() { base.scaled(s) } else { base };
            let share_std = self.noise.share_std(self.noise.std(&plan), self.micro_batches());
            Some(Privacy { plan, share_std })
        } else {
            if self.noise.sigma > 0.0 {
                return Err(Error::config("noise.sigma", format!("{variant} adds no noise; use a dp variant")));
            }
            None
        };
        Ok(Prepared { loss_scale: s, unscale: variant.unscales().then_some(s), privacy })
    }

    fn initial_master(&self) -> Vec<Vec<f64>> {
        flatten_params(&init_params(&self.spec, self.seed, self.precision.master()))
    }
}

pub(crate) struct Privacy {
    pub plan: ResolvedClipPlan,
    pub share_std: f64,
}

pub(crate) struct Prepared {
    pub loss_scale: f64,
    pub unscale: Option<f64>,
    pub privacy: Option<Privacy>,
}

/// What one micro-batch contributes to the step.
pub(crate) struct LaneOutput {
    /// Privatized gradient sum in master precision, canonical order.
    pub grads: Vec<Option<Vec<f64>>>,
    pub losses: Vec<f64>,
    pub overflow: bool,
}

/// Forward and DP backward of several micro-batches in lockstep.
///
/// `fetch(l)` returns layer `l`'s parameters for every lane; it is called
/// once per layer in the forward and once per layer in the backward.
pub(crate) fn lockstep_micro_step(
    setup: &TrainSetup,
    prep: &Prepared,
    step: u64,
    indices: &[usize],
    mut fetch: impl FnMut(usize) -> Result<Vec<LayerParams>>,
) -> Result<Vec<LaneOutput>> {
    let spec = &setup.spec;
    let p = setup.precision;
    let master = p.master();
    let n = spec.num_layers();
    let batches: Vec<_> = indices.iter().map(|&j| setup.data.micro_batch(spec, setup.micro_batch, step, j)).collect();
    let mut caches: Vec<ActivationCache> =
        batches.iter().map(|b| ActivationCache::new(b.inputs.clone(), setup.checkpointing, p)).collect();
    for l in 0..n {
        let params = fetch(l)?;
        for (cache, lp) in caches.iter_mut().zip(&params) {
            cache.forward_layer(&spec.layers[l], &lp.round_to(p))?;
        }
    }
    let mut losses = Vec::with_capacity(indices.len());
    let mut output_grads = Vec::with_capacity(indices.len());
    for (cache, batch) in caches.iter().zip(&batches) {
        let (loss, dy) = loss_and_grad(spec.loss, cache.output()?, &batch.targets, prep.loss_scale, p)?;
        losses.push(loss.into_data());
        output_grads.push(dy);
    }
    let clipping = prep.privacy.as_ref().map(|pr| Clipping { plan: &pr.plan, rule: setup.dispatch });
    let mut passes = caches
        .iter()
        .zip(&output_grads)
        .map(|(cache, dy)| BackwardPass::new(spec, cache, dy, clipping))
        .collect::<Result<Vec<_>>>()?;
    let mut grads: Vec<Vec<Option<Tensor>>> = vec![vec![None; 2 * n]; indices.len()];
    for _ in 0..n {
        let l = passes[0].next_layer().ok_or_else(|| Error::contract("backward out of layers"))?;
        let params = fetch(l)?;
        for ((pass, lp), lane) in passes.iter_mut().zip(&params).zip(grads.iter_mut()) {
            pass.layer(lp, |l, gw, gb| {
                store_layer_grads(spec, lane, l, gw, gb);
                Ok(())
            })?;
        }
    }
    let mut out = Vec::with_capacity(indices.len());
    for (((pass, mut lane), &j), losses) in passes.into_iter().zip(grads).zip(indices).zip(losses) {
        let report = pass.finish(|l, gw, gb| {
            store_layer_grads(spec, &mut lane, l, gw, gb);
            Ok(())
        })?;
        let mut overflow = report.overflow;
        let noise = prep.privacy.as_ref().map(|pr| {
            (pr.share_std, RngStream::new(setup.seed, StreamId::new(setup.noise.lane(j), Purpose::Noise, step)))
        });
        let lane_grads = lane
            .into_iter()
            .enumerate()
            .map(|(k, g)| {
                g.map(|g| {
                    let g = g.round_to(master);
                    let g = match &noise {
                        Some((std, rng)) => privatize(&g, *std, &mut rng.fork(k as u64), master)?,
                        None => g,
                    };
                    overflow |= g.has_infinity();
                    Ok(g.into_data())
                })
                .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LaneOutput { grads: lane_grads, losses, overflow });
    }
    Ok(out)
}

/// Optimizer-ready gradient: unscale by the loss scale, then average over the logical batch.
pub(crate) fn optimizer_grad(sum: &[f64], unscale: Option<f64>, logical_batch: usize, master: Precision) -> Vec<f64> {
    let lb = logical_batch as f64;
    sum.iter()
        .map(|&x| {
            let x = unscale.map_or(x, |s| master.round(x / s));
            master.round(x / lb)
        })
        .collect()
}

pub(crate) fn add_into(acc: &mut Option<Vec<f64>>, x: Vec<f64>, precision: Precision) {
    match acc {
        None => *acc = Some(x),
        Some(a) => {
            for (s, v) in a.iter_mut().zip(x) {
                *s = precision.round(*s + v);
            }
        }
    }
}

/// One simulated worker's model state.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub rank: usize,
    /// Working-precision parameters, canonical order.
    params: Vec<Region>,
    /// Gradient accumulation buffers for trainable tensors.
    grads: Vec<Option<Vec<f64>>>,
    /// Optimizer state over the owned elements of trainable tensors.
    states: Vec<Option<OptimizerState>>,
}

impl WorkerState {
    pub fn param(&self, tensor: usize) -> &Region {
        &self.params[tensor]
    }

    /// Elements held per model-state category (padding included).
    pub fn audit(&self) -> MemoryAudit {
        MemoryAudit {
            params: self.params.iter().map(Region::allocated).sum(),
            grads: self.grads.iter().flatten().map(Vec::len).sum(),
            states: self.states.iter().flatten().map(OptimizerState::allocated).sum(),
        }
    }
}

/// Allocated model-state elements of one worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryAudit {
    pub params: usize,
    pub grads: usize,
    pub states: usize,
}

/// Summary of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Mean per-sample loss over the logical batch.
    pub loss: f64,
    pub flow: FlowStatus,
    /// Working-precision parameters after the update, canonical order.
    pub params: Vec<Vec<f64>>,
}

/// Lockstep DP training over sharded workers.
#[derive(Debug)]
pub struct Simulator {
    setup: TrainSetup,
    plan: ShardPlan,
    comm: Communicator,
    workers: Vec<WorkerState>,
    step: u64,
    last_gradient: Vec<Option<Vec<Vec<f64>>>>,
}

impl Simulator {
    pub fn new(setup: TrainSetup) -> Result<Self> {
        setup.prepare()?;
        let plan = ShardPlan::new(&setup.spec, setup.stage, setup.workers)?;
        let master = setup.initial_master();
        let p = setup.precision;
        let tensors = setup.spec.param_tensors();
        let stage = setup.stage;
        let workers = (0..setup.workers)
            .map(|rank| {
                let mut params = Vec::new();
                let mut grads = Vec::new();
                let mut states = Vec::new();
                for (info, full) in tensors.iter().zip(&master) {
                    let layout = plan.layouts[info.index];
                    let working: Vec<f64> = full.iter().map(|&x| p.round(x)).collect();
                    params.push(if stage.shards_params() {
                        Region::sharded(&working, layout, rank)
                    } else {
                        Region::replicated(working, layout, rank)
                    });
                    if info.trainable {
                        let grad_len = if stage.shards_grads() { layout.chunk } else { layout.len };
                        grads.push(Some(vec![0.0; grad_len]));
                        let owned = if stage.shards_states() { layout.shard(full, rank) } else { full.clone() };
                        states.push(Some(OptimizerState::new(setup.optimizer.kind, owned)));
                    } else {
                        grads.push(None);
                        states.push(None);
                    }
                }
                WorkerState { rank, params, grads, states }
            })
            .collect();
        let comm = Communicator::new(setup.workers);
        let n_tensors = tensors.len();
        Ok(Self { setup, plan, comm, workers, step: 0, last_gradient: vec![None; n_tensors] })
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn shard_plan(&self) -> &ShardPlan {
        &self.plan
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn log(&self) -> &CollectiveLog {
        self.comm.log()
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Full working parameters as an outside observer sees them.
    pub fn params_snapshot(&self) -> Vec<Vec<f64>> {
        (0..self.plan.layouts.len()).map(|k| self.observe(k, |w| w.params[k].local())).collect()
    }

    /// Full master parameters of trainable tensors (`None` for frozen ones).
    pub fn master_snapshot(&self) -> Vec<Option<Vec<f64>>> {
        (0..self.plan.layouts.len())
            .map(|k| {
                self.workers[0].states[k].as_ref()?;
                Some(self.observe_states(k, |s| &s.master))
            })
            .collect()
    }

    /// Privatized gradient sum of the last step after aggregation across
    /// workers, before unscaling and averaging.
    pub fn observe_private_gradient(&self) -> Vec<Option<Vec<f64>>> {
        self.last_gradient
            .iter()
            .enumerate()
            .map(|(k, shards)| {
                let shards = shards.as_ref()?;
                let layout = self.plan.layouts[k];
                if self.setup.stage != Stage::Ddp {
                    let refs: Vec<&[f64]> = shards.iter().map(Vec::as_slice).collect();
                    layout.assemble(&refs).ok()
                } else {
                    Some(shards[0].clone())
                }
            })
            .collect()
    }

    fn observe(&self, k: usize, local: impl Fn(&WorkerState) -> &[f64]) -> Vec<f64> {
        let layout = self.plan.layouts[k];
        if self.workers[0].params[k].is_sharded() {
            let refs: Vec<&[f64]> = self.workers.iter().map(&local).collect();
            layout.assemble(&refs).expect("worker shards match their layout")
        } else {
            local(&self.workers[0]).to_vec()
        }
    }

    fn observe_states(&self, k: usize, part: impl Fn(&OptimizerState) -> &Vec<f64>) -> Vec<f64> {
        let layout = self.plan.layouts[k];
        if self.setup.stage.shards_states() {
            let refs: Vec<&[f64]> =
                self.workers.iter().map(|w| part(w.states[k].as_ref().expect("trainable")).as_slice()).collect();
            layout.assemble(&refs).expect("state shards match their layout")
        } else {
            part(self.workers[0].states[k].as_ref().expect("trainable")).clone()
        }
    }

    /// Fetch layer `l` for every worker: a logged all-gather under stage 3,
    /// each worker's own replica otherwise.
    fn fetch_layer(comm: &mut Communicator, plan: &ShardPlan, workers: &[WorkerState], spec: &NetworkSpec, l: usize, p: Precision) -> Result<Vec<LayerParams>> {
        let layer = &spec.layers[l];
        let tensor = |full: Vec<f64>, shape: Vec<usize>| Tensor::new(shape, full, p);
        if plan.stage.shards_params() {
            let mut gather = |k: usize| -> Result<Vec<f64>> {
                let shards: Vec<&[f64]> = workers.iter().map(|w| w.params[k].local()).collect();
                comm.all_gather(&shards, plan.layouts[k], CallSite { layer: Some(l), tensor: Some(k) })
            };
            let weight = tensor(gather(2 * l)?, vec![layer.d_in, layer.d_out])?;
            let bias = tensor(gather(2 * l + 1)?, vec![layer.d_out])?;
            Ok(vec![LayerParams { weight, bias }; workers.len()])
        } else {
            workers
                .iter()
                .map(|w| {
                    Ok(LayerParams {
                        weight: tensor(w.params[2 * l].local().to_vec(), vec![layer.d_in, layer.d_out])?,
                        bias: tensor(w.params[2 * l + 1].local().to_vec(), vec![layer.d_out])?,
                    })
                })
                .collect()
        }
    }

    /// One optimizer step over the logical batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let setup = &self.setup;
        let prep = setup.prepare()?;
        let step = self.step;
        let p = setup.precision;
        let master = p.master();
        let stage = setup.stage;
        let a_steps = setup.accumulation;
        let n_workers = setup.workers;
        self.comm.set_step(step);
        let tensors = setup.spec.param_tensors();
        let trainable: Vec<usize> = tensors.iter().filter(|t| t.trainable).map(|t| t.index).collect();

        let mut losses = vec![Vec::new(); setup.micro_batches()];
        let mut overflow = false;
        let mut acc: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; tensors.len()]; n_workers];
        for a in 0..a_steps {
            let indices: Vec<usize> = (0..n_workers).map(|r| r * a_steps + a).collect();
            let (comm, plan, workers) = (&mut self.comm, &self.plan, &self.workers);
            let lanes = lockstep_micro_step(setup, &prep, step, &indices, |l| {
                Self::fetch_layer(comm, plan, workers, &setup.spec, l, p)
            })?;
            let mut contribs: Vec<Vec<Option<Vec<f64>>>> = Vec::with_capacity(n_workers);
            for (lane, &j) in lanes.into_iter().zip(&indices) {
                overflow |= lane.overflow;
                losses[j] = lane.losses;
                contribs.push(lane.grads);
            }
            if stage.shards_grads() {
                for &k in &trainable {
                    let inputs: Vec<&[f64]> = contribs.iter().map(|c| c[k].as_deref().expect("trainable")).collect();
                    let shards = self.comm.reduce_scatter(&inputs, self.plan.layouts[k], master, CallSite { layer: Some(k / 2), tensor: Some(k) })?;
                    for (r, shard) in shards.into_iter().enumerate() {
                        add_into(&mut acc[r][k], shard, master);
                    }
                }
            } else {
                for (r, c) in contribs.into_iter().enumerate() {
                    for (k, g) in c.into_iter().enumerate() {
                        if let Some(g) = g {
                            add_into(&mut acc[r][k], g, master);
                        }
                    }
                }
            }
        }

        for (w, sums) in self.workers.iter_mut().zip(&acc) {
            for &k in &trainable {
                w.grads[k].clone_from(&sums[k]);
            }
        }

        // Aggregate across workers for stages that accumulated locally.
        let mut owned: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; tensors.len()]; n_workers];
        for &k in &trainable {
            let layout = self.plan.layouts[k];
            let site = CallSite { layer: Some(k / 2), tensor: Some(k) };
            let shards: Vec<Vec<f64>> = if stage.shards_grads() {
                acc.iter_mut().map(|w| w[k].take().expect("accumulated")).collect()
            } else {
                let inputs: Vec<&[f64]> = acc.iter().map(|w| w[k].as_deref().expect("accumulated")).collect();
                self.comm.reduce_scatter(&inputs, layout, master, site)?
            };
            if stage == Stage::Ddp {
                let refs: Vec<&[f64]> = shards.iter().map(Vec::as_slice).collect();
                let full = self.comm.all_gather(&refs, layout, site)?;
                for r in 0..n_workers {
                    owned[r][k] = Some(full.clone());
                }
                self.last_gradient[k] = Some(vec![full]);
            } else {
                for (r, s) in shards.iter().enumerate() {
                    owned[r][k] = Some(s.clone());
                }
                self.last_gradient[k] = Some(shards);
            }
        }

        // Update owned optimizer state, refresh working parameters.
        let lb = self.setup.logical_batch();
        let opt = self.setup.optimizer;
        for (w, grads) in self.workers.iter_mut().zip(owned) {
            for &k in &trainable {
                let sum = grads[k].as_ref().expect("owned gradient");
                let g = optimizer_grad(sum, prep.unscale, lb, master);
                let state = w.states[k].as_mut().expect("trainable");
                state.update(&opt, &g, step + 1, master);
                if stage.shards_params() || !stage.shards_states() {
                    let fresh: Vec<f64> = state.master.iter().map(|&x| p.round(x)).collect();
                    w.params[k].local_mut().copy_from_slice(&fresh);
                }
            }
        }
        if stage.shards_states() && !stage.shards_params() {
            for &k in &trainable {
                let layout = self.plan.layouts[k];
                let shards: Vec<Vec<f64>> = self.workers
                    .iter()
                    .map(|w| w.states[k].as_ref().expect("trainable").master.iter().map(|&x| p.round(x)).collect())
                    .collect();
                let refs: Vec<&[f64]> = shards.iter().map(Vec::as_slice).collect();
                let full = self.comm.all_gather(&refs, layout, CallSite { layer: Some(k / 2), tensor: Some(k) })?;
                for w in &mut self.workers {
                    w.params[k].local_mut().copy_from_slice(&full);
                }
            }
        }

        self.step += 1;
        let total: f64 = losses.iter().flatten().sum();
        let flow = FlowStatus { overflow, underflow_fraction: self.underflow_probe(step)? };
        Ok(StepRecord { step, loss: total / lb as f64, flow, params: self.params_snapshot() })
    }

    /// Output-gradient underflow on the first micro-batch of `step`, measured
    /// by an observer against a full-precision backward on the updated parameters.
    fn underflow_probe(&self, step: u64) -> Result<f64> {
        let setup = &self.setup;
        if !setup.precision.is_half() {
            return Ok(0.0);
        }
        let params = unflatten_params(&setup.spec, &self.params_snapshot(), setup.precision)?;
        let batch = setup.data.micro_batch(&setup.spec, setup.micro_batch, step, 0);
        let plan = setup.clip.resolve(&setup.spec)?;
        let rng = RngStream::new(setup.seed, StreamId::new(0, Purpose::Test, step));
        let inputs = PipelineInputs {
            pipeline: setup.amp,
            clip: &plan,
            noise: &setup.noise,
            noise_rng: &rng,
            rule: setup.dispatch,
            precision: setup.precision,
            checkpointing: false,
        };
        Ok(run_pipeline(&setup.spec, &params, &batch, inputs)?.1.underflow_fraction)
    }

    pub fn run(&mut self, steps: u64) -> Result<Vec<StepRecord>> {
        (0..steps).map(|_| self.train_step()).collect()
    }
}

/// Single-device DP training over the same micro-batches, the oracle for
/// [`Simulator`] trajectories.
#[derive(Debug)]
pub struct ReferenceTrainer {
    setup: TrainSetup,
    params: Vec<Vec<f64>>,
    states: Vec<Option<OptimizerState>>,
    step: u64,
    last_gradient: Vec<Option<Vec<f64>>>,
}

impl ReferenceTrainer {
    /// Oracle for `setup`, run on one device with every micro-batch of the
    /// logical batch processed in turn.
    pub fn new(setup: &TrainSetup) -> Result<Self> {
        let setup = setup.single_device();
        setup.prepare()?;
        let master = setup.initial_master();
        let p = setup.precision;
        let tensors = setup.spec.param_tensors();
        let params = master.iter().map(|t| t.iter().map(|&x| p.round(x)).collect()).collect();
        let states = tensors
            .iter()
            .zip(master)
            .map(|(info, m)| info.trainable.then(|| OptimizerState::new(setup.optimizer.kind, m)))
            .collect();
        Ok(Self { setup, params, states, step: 0, last_gradient: vec![None; tensors.len()] })
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn last_private_gradient(&self) -> &[Option<Vec<f64>>] {
        &self.last_gradient
    }

    pub fn train_step(&mut self) -> Result<Vec<Vec<f64>>> {
        let setup = &self.setup;
        let prep = setup.prepare()?;
        let p = setup.precision;
        let master = p.master();
        let layer_params = unflatten_params(&setup.spec, &self.params, p)?;
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        for j in 0..setup.micro_batches() {
            let lane = lockstep_micro_step(setup, &prep, self.step, &[j], |l| Ok(vec![layer_params[l].clone()]))?;
            for (k, g) in lane.into_iter().next().expect("one lane").grads.into_iter().enumerate() {
                if let Some(g) = g {
                    add_into(&mut acc[k], g, master);
                }
            }
        }
        let lb = setup.logical_batch();
        for (k, sum) in acc.iter().enumerate() {
            let (Some(sum), Some(state)) = (sum, self.states[k].as_mut()) else { continue };
            let g = optimizer_grad(sum, prep.unscale, lb, master);
            state.update(&setup.optimizer, &g, self.step + 1, master);
            self.params[k] = state.master.iter().map(|&x| p.round(x)).collect();
        }
        self.last_gradient = acc;
        self.step += 1;
        Ok(self.params.clone())
    }

    pub fn run(&mut self, steps: u64) -> Result<Vec<Vec<Vec<f64>>>> {
        (0..steps).map(|_| self.train_step()).collect()
    }
}
