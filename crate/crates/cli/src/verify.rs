//! Named invariant suites run by `dpzero verify`.

use std::fmt;

use clap::ValueEnum;
use dpzero::amp::{detect_overflow_in_ghost_terms, run_pipeline, PipelineInputs, ScalingPipeline, Variant};
use dpzero::cost::{comm_volume, max_trainable_model, CostInputs};
use dpzero::dp::{
    layer_sq_norms, psg_norm_ghost, psg_norm_instantiated, ClipFunction, ClipPlan, DispatchRule, NoiseMode,
    NoisePolicy, NormMethod, Partition,
};
use dpzero::network::{
    init_params, Activation, Batch, LayerParams, LayerSpec, LossKind, NetworkSpec, Targets, Trainable,
};
use dpzero::numerics::{gaussian, Precision, Purpose, RngStream, StreamId, Tensor};
use dpzero::zero::{
    memory_footprint, DataSpec, OptimizerSpec, ReferenceTrainer, Simulator, Stage, TrainSetup,
};
use dpzero::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    GhostOracle,
    ShardingTransparency,
    NoiseCalibration,
    AmpLaws,
    CostAgreement,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] =
        [Suite::GhostOracle, Suite::ShardingTransparency, Suite::NoiseCalibration, Suite::AmpLaws, Suite::CostAgreement];

    pub fn name(self) -> &'static str {
        match self {
            Suite::GhostOracle => "ghost-oracle",
            Suite::ShardingTransparency => "sharding-transparency",
            Suite::NoiseCalibration => "noise-calibration",
            Suite::AmpLaws => "amp-laws",
            Suite::CostAgreement => "cost-agreement",
            Suite::All => "all",
        }
    }
}

/// Knobs for exercising the suites themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    /// Norm dispatch used by the code under test.
    pub dispatch: DispatchRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}::{} {}", self.suite, self.name, self.detail)
    }
}

struct Checks {
    suite: &'static str,
    out: Vec<Check>,
}

impl Checks {
    fn new(suite: Suite) -> Self {
        Self { suite: suite.name(), out: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.out.push(Check { suite: self.suite, name: name.into(), passed, detail: detail.into() });
    }
}

pub fn run_suite(suite: Suite, options: SuiteOptions) -> Result<Vec<Check>> {
    match suite {
        Suite::GhostOracle => ghost_oracle(options),
        Suite::ShardingTransparency => sharding_transparency(options),
        Suite::NoiseCalibration => noise_calibration(options),
        Suite::AmpLaws => amp_laws(options),
        Suite::CostAgreement => cost_agreement(options),
        Suite::All => {
            let mut all = Vec::new();
            for s in Suite::EACH {
                all.extend(run_suite(s, options)?);
            }
            Ok(all)
        }
    }
}

fn stream(sub: u64) -> RngStream {
    RngStream::new(2024, StreamId::new(0, Purpose::Test, 0).with_sub(sub))
}

fn rel(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE)
}

fn ghost_oracle(options: SuiteOptions) -> Result<Vec<Check>> {
    let mut checks = Checks::new(Suite::GhostOracle);
    let mut shapes = stream(0);
    let (mut worst_ghost, mut worst_mixed) = (0.0f64, 0.0f64);
    let mut wrong_dispatch = 0;
    let cases = 1000;
    for case in 0..cases {
        let b = 1 + shapes.below(8);
        let t = 1 + shapes.below(16);
        let d = 1 + shapes.below(32);
        let p = 1 + shapes.below(32);
        let a = gaussian(&mut stream(1 + 2 * case), vec![b, t, d], 1.0);
        let g = gaussian(&mut stream(2 + 2 * case), vec![b, t, p], 1.0);
        let inst = psg_norm_instantiated(&a, &g)?;
        let ghost = psg_norm_ghost(&a, &g)?;
        let mixed = layer_sq_norms(&a, &g, Trainable { weight: true, bias: false }, options.dispatch, Precision::F64)?;
        for (i, x) in inst.iter().enumerate() {
            worst_ghost = worst_ghost.max(rel(*x, ghost[i]));
            worst_mixed = worst_mixed.max(rel(*x, mixed.weight.as_ref().map_or(f64::NAN, |w| w[i])));
        }
        // Per sample, two T×T Grams cost about 2T²(d+p) against 2Tdp for the materialized gradient.
        let cheaper = if 2 * t * t <= d * p { NormMethod::Ghost } else { NormMethod::Instantiated };
        if mixed.method != Some(cheaper) {
            wrong_dispatch += 1;
        }
    }
    checks.push("ghost-equals-instantiated", worst_ghost < 1e-10, format!("max relative error {worst_ghost:.3e} over {cases} cases"));
    checks.push("mixed-equals-instantiated", worst_mixed < 1e-10, format!("max relative error {worst_mixed:.3e}"));
    checks.push("dispatch-picks-cheaper", wrong_dispatch == 0, format!("{wrong_dispatch} of {cases} layers dispatched to the costlier method"));
    Ok(checks.out)
}

fn three_layer_net() -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::new(6, 8, Activation::Tanh, 3),
            LayerSpec::new(8, 8, Activation::Relu, 3),
            LayerSpec::new(8, 4, Activation::Identity, 3),
        ],
        LossKind::SquaredError,
    )
    .expect("valid network")
}

fn dp_setup(spec: NetworkSpec, stage: Stage, workers: usize, options: SuiteOptions) -> TrainSetup {
    TrainSetup {
        spec,
        data: DataSpec::new(31),
        stage,
        workers,
        micro_batch: 2,
        accumulation: 1,
        clip: ClipPlan::layer_wise(ClipFunction::Vanilla, 0.5),
        noise: NoisePolicy::new(0.7, NoiseMode::SharedSeed),
        optimizer: OptimizerSpec::adam(1e-2),
        amp: ScalingPipeline::unscaled_dp(),
        precision: Precision::F64,
        checkpointing: false,
        dispatch: options.dispatch,
        seed: 77,
    }
}

fn sharding_transparency(options: SuiteOptions) -> Result<Vec<Check>> {
    let mut checks = Checks::new(Suite::ShardingTransparency);
    let mut cases = Vec::new();
    for stage in Stage::ALL {
        for workers in [1, 2, 4] {
            for function in [ClipFunction::Vanilla, ClipFunction::automatic()] {
                cases.push((stage, workers, ClipPlan::layer_wise(function, 0.5)));
            }
        }
    }
    for stage in [Stage::Ddp, Stage::Zero1] {
        cases.push((stage, 4, ClipPlan::all_layer(ClipFunction::Vanilla, 1.0)));
    }
    for (stage, workers, clip) in cases {
        let partition = if clip.partition == Partition::AllLayer { "all-layer" } else { "layer-wise" };
        let function = if clip.function == ClipFunction::Vanilla { "vanilla" } else { "automatic" };
        let label = format!("stage{}-n{workers}-{partition}-{function}", stage.index());
        let mut setup = dp_setup(three_layer_net(), stage, workers, options);
        setup.clip = clip;
        let mut sim = Simulator::new(setup.clone())?;
        let mut oracle = ReferenceTrainer::new(&setup)?;
        let mut diverged = None;
        for step in 0..3 {
            let got = sim.train_step()?.params;
            if got != oracle.train_step()? && diverged.is_none() {
                diverged = Some(step);
            }
        }
        let detail = diverged.map_or("bitwise equal over 3 steps".into(), |s| format!("diverged at step {s}"));
        checks.push(label, diverged.is_none(), detail);
    }
    Ok(checks.out)
}

/// Sample standard deviation of the noise in the aggregated private
/// gradient, measured against a noiseless twin run.
fn measured_noise_std(mode: NoiseMode, sigma: f64, thresholds: &[f64], seeds: u64, options: SuiteOptions) -> Result<(f64, usize)> {
    let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0usize);
    for seed in 0..seeds {
        let mut setup = dp_setup(three_layer_net(), Stage::Zero2, 4, options);
        setup.clip = ClipPlan::new(Partition::LayerWise, ClipFunction::Vanilla, thresholds.to_vec());
        setup.noise = NoisePolicy::new(sigma, mode);
        setup.seed = seed;
        let mut noisy = Simulator::new(setup.clone())?;
        setup.noise.sigma = 0.0;
        let mut clean = Simulator::new(setup)?;
        noisy.train_step()?;
        clean.train_step()?;
        for (x, y) in noisy.observe_private_gradient().iter().zip(clean.observe_private_gradient()) {
            if let (Some(x), Some(y)) = (x, y) {
                for (a, b) in x.iter().zip(&y) {
                    let z = a - b;
                    sum += z;
                    sum_sq += z * z;
                    n += 1;
                }
            }
        }
    }
    let mean = sum / n as f64;
    Ok(((sum_sq / n as f64 - mean * mean).sqrt(), n))
}

fn noise_calibration(options: SuiteOptions) -> Result<Vec<Check>> {
    let mut checks = Checks::new(Suite::NoiseCalibration);
    let thresholds = [0.5, 1.0, 2.0];
    let sigma = 0.8;
    let expected = sigma * thresholds.iter().map(|r| r * r).sum::<f64>().sqrt();
    for mode in [NoiseMode::SharedSeed, NoiseMode::IndependentSeeds] {
        let (std, n) = measured_noise_std(mode, sigma, &thresholds, 40, options)?;
        let err = rel(std, expected);
        let name = if mode == NoiseMode::SharedSeed { "shared-seed" } else { "independent-seeds" };
        checks.push(name, err < 0.03, format!("std {std:.5} vs {expected:.5} ({:.2}%) over {n} draws", 100.0 * err));
    }
    Ok(checks.out)
}

fn amp_net() -> NetworkSpec {
    NetworkSpec::new(
        vec![LayerSpec::new(4, 6, Activation::Tanh, 3), LayerSpec::new(6, 2, Activation::Identity, 3)],
        LossKind::SquaredError,
    )
    .expect("valid network")
}

fn pipeline_grads(
    spec: &NetworkSpec,
    params: &[LayerParams],
    batch: &Batch,
    pipeline: ScalingPipeline,
    threshold: f64,
    precision: Precision,
    options: SuiteOptions,
) -> Result<(Vec<f64>, dpzero::amp::FlowStatus)> {
    let clip = ClipPlan::layer_wise(ClipFunction::Vanilla, threshold).resolve(spec)?;
    let noise = if pipeline.variant.is_private() { NoisePolicy::new(0.5, NoiseMode::SharedSeed) } else { NoisePolicy::none() };
    let rng = stream(900);
    let inputs = PipelineInputs {
        pipeline,
        clip: &clip,
        noise: &noise,
        noise_rng: &rng,
        rule: options.dispatch,
        precision,
        checkpointing: false,
    };
    let (grads, flow) = run_pipeline(spec, params, batch, inputs)?;
    Ok((grads.iter().flatten().flat_map(|t| t.data().to_vec()).collect(), flow))
}

fn amp_laws(options: SuiteOptions) -> Result<Vec<Check>> {
    let mut checks = Checks::new(Suite::AmpLaws);
    let spec = amp_net();
    let params = init_params(&spec, 5, Precision::F64);
    let batch = Batch {
        inputs: gaussian(&mut stream(901), vec![4, 3, 4], 1.0),
        targets: Targets::Regression(gaussian(&mut stream(902), vec![4, 3, 2], 3.0)),
    };
    let s = 1024.0;
    let tiny = 1e-3;
    let run = |variant, scale, r| pipeline_grads(&spec, &params, &batch, ScalingPipeline::new(variant, scale)?, r, Precision::F64, options);

    let (base, _) = run(Variant::Dp1346, 1.0, tiny)?;
    let (scaled, _) = run(Variant::Dp123456, s, tiny)?;
    let shrunk = base.iter().zip(&scaled).all(|(b, x)| *x == b / s);
    checks.push("loss-scale-over-shrinks", shrunk, format!("dp-123456 equals dp-1346 / {s} elementwise"));

    let (restored, _) = run(Variant::Dp1234s56, s, 0.05)?;
    let (reference, _) = run(Variant::Dp1346, 1.0, 0.05)?;
    checks.push("scaled-threshold-restores", restored == reference, "dp-1234s56 equals dp-1346");

    let values: Vec<f64> = (0..=80).map(|k| 10f64.powf(-8.0 + k as f64 / 10.0)).collect();
    let n = values.len();
    let probe = NetworkSpec::new(vec![LayerSpec::new(1, n, Activation::Identity, 1)], LossKind::SquaredError)?;
    let zero = vec![LayerParams { weight: Tensor::zeros(vec![1, n], Precision::F64), bias: Tensor::zeros(vec![n], Precision::F64) }];
    let targets = Tensor::new(vec![1, 1, n], values.iter().map(|v| -v).collect(), Precision::F64)?;
    let probe_batch = Batch { inputs: Tensor::zeros(vec![1, 1, 1], Precision::F64), targets: Targets::Regression(targets) };
    let flow = |variant, scale| -> Result<dpzero::amp::FlowStatus> {
        Ok(pipeline_grads(&probe, &zero, &probe_batch, ScalingPipeline::new(variant, scale)?, 1.0, Precision::F16, options)?.1)
    };
    let plain = flow(Variant::Std136, 1.0)?;
    let boosted = flow(Variant::Std12356, s)?;
    checks.push(
        "scaling-reduces-underflow",
        boosted.underflow_fraction < plain.underflow_fraction && !boosted.overflow,
        format!("f16 underflow {:.3} with S={s} vs {:.3} without", boosted.underflow_fraction, plain.underflow_fraction),
    );

    let a = Tensor::from_fn(vec![1, 8, 4], Precision::F64, |i| if i % 3 == 0 { -1.0 } else { 1.0 });
    let g = Tensor::from_fn(vec![1, 8, 4], Precision::F64, |i| if i % 2 == 0 { 1.0 } else { -1.0 }).scale(1e3);
    let f16 = detect_overflow_in_ghost_terms(&a, &g, Precision::F16)?;
    let bf16 = detect_overflow_in_ghost_terms(&a, &g, Precision::Bf16)?;
    checks.push(
        "ghost-gram-overflow",
        f16.overflow && !bf16.overflow,
        format!("S=1000 unit gradients: f16 overflow={}, bf16 overflow={}", f16.overflow, bf16.overflow),
    );
    Ok(checks.out)
}

fn cost_agreement(options: SuiteOptions) -> Result<Vec<Check>> {
    let mut checks = Checks::new(Suite::CostAgreement);
    let full = three_layer_net();
    let mut peft = full.clone();
    peft.layers[0] = peft.layers[0].clone().frozen();
    peft.layers[1] = peft.layers[1].clone().frozen();
    peft.layers[2] = peft.layers[2].clone().with_trainable(Trainable { weight: false, bias: true });
    let mut mismatches = Vec::new();
    let mut audits = 0;
    for (label, spec) in [("full", full), ("peft", peft)] {
        for stage in Stage::ALL {
            for workers in [1, 2, 4] {
                for accumulation in [1, 2] {
                    let mut setup = dp_setup(spec.clone(), stage, workers, options);
                    setup.accumulation = accumulation;
                    let mut sim = Simulator::new(setup)?;
                    sim.train_step()?;
                    let mut input = CostInputs::new(2.0, 3.0, spec.psi_model() as f64, workers, stage, true);
                    input.psi_train = Some(spec.psi_train() as f64);
                    input.accumulation = accumulation;
                    let logged = sim.log().step_volume(0) as f64;
                    let predicted = comm_volume(&input).elements;
                    if logged != predicted {
                        mismatches.push(format!("{label} stage{} n{workers} a{accumulation}: {logged} vs {predicted}", stage.index()));
                    }
                    let footprint = memory_footprint(
                        stage,
                        workers,
                        sim.setup().optimizer.kind,
                        spec.psi_model() as f64,
                        spec.psi_train() as f64,
                        Precision::F64,
                    );
                    for w in sim.workers() {
                        let audit = w.audit();
                        let bytes = |elements: usize| elements as f64 * 8.0;
                        if bytes(audit.params) != footprint.params
                            || bytes(audit.grads) != footprint.grads
                            || bytes(audit.states) != footprint.states
                        {
                            mismatches.push(format!("{label} stage{} n{workers}: audited memory differs", stage.index()));
                        }
                        audits += 1;
                    }
                }
            }
        }
    }
    checks.push("simulator-matches-model", mismatches.is_empty(), if mismatches.is_empty() { format!("{audits} worker audits agree") } else { mismatches.join("; ") });

    let psi = 1e9;
    let volume = |stage, psi_train: f64| {
        let mut input = CostInputs::new(1.0, 1.0, psi, 8, stage, true);
        input.psi_train = Some(psi_train);
        comm_volume(&input).elements
    };
    let ratio = volume(Stage::Zero3, psi) / volume(Stage::Zero2, psi);
    checks.push("stage3-extra-volume", ratio == 1.5, format!("stage 3 / stage 2 = {ratio}"));
    let reduction = volume(Stage::Zero2, psi) / volume(Stage::Zero2, 1e-3 * psi);
    checks.push("peft-volume-reduction", rel(reduction, 1000.0) < 1e-9, format!("full / peft = {reduction:.3}"));

    let maxima: Vec<f64> = [Stage::Zero1, Stage::Zero2, Stage::Zero3].iter().map(|&s| max_trainable_model(32e9, 64, s) / 1e9).collect();
    let within = maxima.iter().zip([7.6, 14.4, 128.0]).all(|(m, quoted)| rel(*m, quoted) < 0.01);
    checks.push("capacity-at-32gb-64-workers", within, format!("{:.2}/{:.2}/{:.1} billion", maxima[0], maxima[1], maxima[2]));
    Ok(checks.out)
}
