use super::*;
use crate::network::{
    backward_output_grads, forward, init_params, loss_and_grad, param_grad, Activation, Batch, LayerSpec, LossKind,
    NetworkSpec, Targets,
};
use crate::numerics::{gaussian, Precision, Purpose, RngStream, StreamId, Tensor};

fn rng(sub: u64) -> RngStream {
    RngStream::new(7, StreamId::new(0, Purpose::Test, 0).with_sub(sub))
}

fn randn(shape: Vec<usize>, sub: u64) -> Tensor {
    gaussian(&mut rng(sub), shape, 1.0)
}

fn t3(b: usize, t: usize, d: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![b, t, d], data.to_vec(), Precision::F64).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

#[test]
fn zero_inputs_give_zero_norms() {
    let a = Tensor::zeros(vec![2, 3, 4], Precision::F64);
    let g = randn(vec![2, 3, 5], 1);
    assert_eq!(psg_norm_instantiated(&a, &g).unwrap(), vec![0.0, 0.0]);
    let a = randn(vec![2, 3, 4], 2);
    let g = Tensor::zeros(vec![2, 3, 5], Precision::F64);
    assert_eq!(psg_norm_ghost(&a, &g).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn single_token_is_rank_one() {
    let a = t3(1, 1, 3, &[1.0, -2.0, 0.5]);
    let g = t3(1, 1, 2, &[3.0, 4.0]);
    let expected = 5.25 * 25.0;
    assert_eq!(psg_norm_instantiated(&a, &g).unwrap(), vec![expected]);
    assert_eq!(psg_norm_ghost(&a, &g).unwrap(), vec![expected]);
}

#[test]
fn orthogonal_tokens_have_diagonal_grams() {
    // Token rows of `a` are distinct axes, so a aᵀ is diagonal.
    let a = t3(1, 3, 4, &[2.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
    let g = t3(1, 3, 2, &[1.0, 2.0, -0.5, 0.25, 4.0, 1.0]);
    let a_sq = [4.0, 1.0, 9.0];
    let g_sq = [5.0, 0.3125, 17.0];
    let closed: f64 = a_sq.iter().zip(&g_sq).map(|(x, y)| x * y).sum();
    assert_eq!(psg_norm_ghost(&a, &g).unwrap()[0], closed);
    assert!(rel(psg_norm_instantiated(&a, &g).unwrap()[0], closed) < 1e-15);
}

#[test]
fn ghost_matches_instantiated_on_random_shapes() {
    let mut shape_rng = rng(99);
    for case in 0..200 {
        let b = 1 + shape_rng.below(4);
        let t = 1 + shape_rng.below(6);
        let d = 1 + shape_rng.below(9);
        let p = 1 + shape_rng.below(9);
        let a = randn(vec![b, t, d], 1000 + 2 * case);
        let g = randn(vec![b, t, p], 1001 + 2 * case);
        let inst = psg_norm_instantiated(&a, &g).unwrap();
        let ghost = psg_norm_ghost(&a, &g).unwrap();
        for (x, y) in inst.iter().zip(&ghost) {
            assert!(rel(*x, *y) < 1e-10, "case {case}: {x} vs {y}");
        }
    }
}

#[test]
fn bias_norm_examples() {
    let g = t3(2, 1, 2, &[3.0, 4.0, 1.0, -1.0]);
    assert_eq!(psg_norm_bias(&g).unwrap(), vec![25.0, 2.0]);
    let g = t3(1, 2, 3, &[1.0, -2.0, 0.5, -1.0, 2.0, -0.5]);
    assert_eq!(psg_norm_bias(&g).unwrap(), vec![0.0]);
}

#[test]
fn bias_norm_matches_finite_differences() {
    let spec = NetworkSpec::new(vec![LayerSpec::new(3, 2, Activation::Tanh, 4)], LossKind::SquaredError).unwrap();
    let params = init_params(&spec, 3, Precision::F64);
    let batch = Batch { inputs: randn(vec![3, 4, 3], 5), targets: Targets::Regression(randn(vec![3, 4, 2], 6)) };
    let (_, cache) = forward(&spec, &params, &batch, Precision::F64, false).unwrap();
    let (_, dy) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, Precision::F64).unwrap();
    let gs = backward_output_grads(&spec, &params, &cache, &dy).unwrap();
    let norms = psg_norm_bias(&gs[0]).unwrap();
    let h = 1e-5;
    for (i, &norm) in norms.iter().enumerate() {
        let mut fd_sq = 0.0;
        for q in 0..2 {
            let loss_at = |delta: f64| {
                let mut p = params.clone();
                let mut bias = p[0].bias.data().to_vec();
                bias[q] += delta;
                p[0].bias = Tensor::new(vec![2], bias, Precision::F64).unwrap();
                forward(&spec, &p, &batch, Precision::F64, false).unwrap().0.data()[i]
            };
            let d = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            fd_sq += d * d;
        }
        assert!(rel(norm, fd_sq) < 1e-6, "sample {i}: {norm} vs {fd_sq}");
    }
}

#[test]
fn dispatch_examples() {
    assert_eq!(ghost_dispatch(1, 1000, 1000), NormMethod::Ghost);
    assert_eq!(ghost_dispatch(1000, 4, 4), NormMethod::Instantiated);
    assert_eq!(ghost_dispatch(4, 8, 4), NormMethod::Ghost);
    assert_eq!(ghost_dispatch(4, 31, 1), NormMethod::Instantiated);
    assert_eq!(DispatchRule { grams: 0 }.choose(1000, 1, 1), NormMethod::Ghost);
}

fn plan_for(function: ClipFunction, thresholds: Vec<f64>, groups: usize) -> ResolvedClipPlan {
    ResolvedClipPlan { group_of_layer: (0..groups).map(Some).collect(), thresholds, function }
}

fn norms_of(sq: Vec<Vec<f64>>) -> PerSampleNorms {
    PerSampleNorms { methods: vec![None; sq[0].len()], sq }
}

#[test]
fn clip_factor_examples() {
    let plan = plan_for(ClipFunction::Vanilla, vec![1.5], 1);
    let f = clip_factors(&norms_of(vec![vec![9.0], vec![0.5625], vec![0.0]]), &plan).unwrap();
    assert_eq!(f, vec![vec![0.5], vec![1.0], vec![1.0]]);
    let plan = plan_for(ClipFunction::automatic(), vec![1.0], 1);
    let f = clip_factors(&norms_of(vec![vec![0.99 * 0.99]]), &plan).unwrap();
    assert!((f[0][0] - 1.0).abs() < 1e-15);
}

#[test]
fn negative_norm_is_a_contract_error() {
    let plan = plan_for(ClipFunction::Vanilla, vec![1.0], 1);
    assert!(matches!(clip_factors(&norms_of(vec![vec![-1.0]]), &plan), Err(crate::Error::Contract(_))));
}

#[test]
fn infinite_threshold_gives_unit_factors() {
    let plan = plan_for(ClipFunction::Vanilla, vec![f64::INFINITY; 2], 2);
    let f = clip_factors(&norms_of(vec![vec![1e30, 0.0], vec![3.0, 1e-30]]), &plan).unwrap();
    assert!(f.iter().flatten().all(|&c| c == 1.0));
}

fn three_layer(tokens: usize) -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::new(4, 6, Activation::Tanh, tokens),
            LayerSpec::new(6, 5, Activation::Relu, tokens),
            LayerSpec::new(5, 3, Activation::Identity, tokens),
        ],
        LossKind::SquaredError,
    )
    .unwrap()
}

fn setup(spec: &NetworkSpec, b: usize) -> (Vec<crate::network::LayerParams>, crate::network::ActivationCache, Tensor) {
    let t = spec.tokens();
    let params = init_params(spec, 11, Precision::F64);
    let batch = Batch {
        inputs: randn(vec![b, t, spec.input_dim()], 20),
        targets: Targets::Regression(randn(vec![b, t, spec.output_dim()], 21).scale(3.0)),
    };
    let (_, cache) = forward(spec, &params, &batch, Precision::F64, false).unwrap();
    let (_, dy) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, Precision::F64).unwrap();
    (params, cache, dy)
}

#[test]
fn unclipped_backward_is_the_standard_gradient() {
    let spec = three_layer(3);
    let (params, cache, dy) = setup(&spec, 4);
    let (grads, report) = clipped_grads(&spec, &params, &cache, &dy, None).unwrap();
    assert!(report.factors.is_none());
    let gs = backward_output_grads(&spec, &params, &cache, &dy).unwrap();
    for l in 0..3 {
        let (gw, gb) = param_grad(cache.input(l).unwrap(), &gs[l], &[1.0; 4], Precision::F64).unwrap();
        assert_eq!(grads[2 * l].as_ref().unwrap(), &gw);
        assert_eq!(grads[2 * l + 1].as_ref().unwrap(), &gb);
    }
}

#[test]
fn infinite_threshold_reduces_to_standard_bitwise() {
    let spec = three_layer(3);
    let (params, cache, dy) = setup(&spec, 4);
    let (standard, _) = clipped_grads(&spec, &params, &cache, &dy, None).unwrap();
    for partition in [Partition::LayerWise, Partition::AllLayer] {
        let plan = ClipPlan::new(partition, ClipFunction::Vanilla, vec![f64::INFINITY]).resolve(&spec).unwrap();
        let clip = Clipping { plan: &plan, rule: DispatchRule::default() };
        let (clipped, _) = clipped_grads(&spec, &params, &cache, &dy, Some(clip)).unwrap();
        let mut r = rng(0);
        for (c, s) in clipped.iter().zip(&standard) {
            let noised = privatize(c.as_ref().unwrap(), 0.0, &mut r, Precision::F64).unwrap();
            assert_eq!(&noised, s.as_ref().unwrap());
        }
    }
}

/// Per-sample gradients of every trainable tensor, `[B][tensor]`.
fn per_sample_grads(spec: &NetworkSpec, cache: &crate::network::ActivationCache, gs: &[Tensor], b: usize) -> Vec<Vec<Tensor>> {
    (0..b)
        .map(|i| {
            let mut onehot = vec![0.0; b];
            onehot[i] = 1.0;
            (0..spec.num_layers())
                .flat_map(|l| {
                    let (gw, gb) = param_grad(cache.input(l).unwrap(), &gs[l], &onehot, Precision::F64).unwrap();
                    [gw, gb]
                })
                .collect()
        })
        .collect()
}

#[test]
fn vanilla_clipping_bounds_group_norms() {
    let spec = three_layer(3);
    let b = 5;
    let (params, cache, dy) = setup(&spec, b);
    let gs = backward_output_grads(&spec, &params, &cache, &dy).unwrap();
    let per_sample = per_sample_grads(&spec, &cache, &gs, b);
    for (partition, r) in [(Partition::LayerWise, vec![0.05, 0.1, 0.2]), (Partition::AllLayer, vec![0.1])] {
        let plan = ClipPlan::new(partition, ClipFunction::Vanilla, r).resolve(&spec).unwrap();
        let clip = Clipping { plan: &plan, rule: DispatchRule::default() };
        let (_, report) = clipped_grads(&spec, &params, &cache, &dy, Some(clip)).unwrap();
        let factors = report.factors.unwrap();
        let mut clipped_any = false;
        for i in 0..b {
            for m in 0..plan.num_groups() {
                let sq: f64 = plan
                    .members(m)
                    .iter()
                    .flat_map(|&l| [2 * l, 2 * l + 1])
                    .map(|k| per_sample[i][k].scale(factors[i][m]).sum_sq())
                    .sum();
                assert!(sq.sqrt() <= plan.thresholds[m] * (1.0 + 1e-12));
                clipped_any |= factors[i][m] < 1.0;
            }
        }
        assert!(clipped_any);
    }
}

#[test]
fn all_layer_factors_match_reaggregated_layer_norms() {
    let spec = three_layer(2);
    let (params, cache, dy) = setup(&spec, 4);
    let r = 0.3;
    let layer_plan = ClipPlan::layer_wise(ClipFunction::Vanilla, r).resolve(&spec).unwrap();
    let all_plan = ClipPlan::all_layer(ClipFunction::Vanilla, r).resolve(&spec).unwrap();
    let rule = DispatchRule::default();
    let (_, by_layer) = clipped_grads(&spec, &params, &cache, &dy, Some(Clipping { plan: &layer_plan, rule })).unwrap();
    let (_, all) = clipped_grads(&spec, &params, &cache, &dy, Some(Clipping { plan: &all_plan, rule })).unwrap();
    let layer_sq = by_layer.norms.unwrap().sq;
    let regrouped = norms_of(layer_sq.iter().map(|row| vec![row.iter().sum::<f64>()]).collect());
    let expected = clip_factors(&regrouped, &all_plan).unwrap();
    for (x, y) in all.factors.unwrap().iter().flatten().zip(expected.iter().flatten()) {
        assert!(rel(*x, *y) < 1e-14);
    }
}

#[test]
fn single_layer_groups_stream_like_layer_wise() {
    let spec = three_layer(3);
    let (params, cache, dy) = setup(&spec, 3);
    let rule = DispatchRule::default();
    let lw = ClipPlan::layer_wise(ClipFunction::automatic(), 0.5).resolve(&spec).unwrap();
    let custom = ClipPlan::new(Partition::Groups(vec![0, 1, 2]), ClipFunction::automatic(), vec![0.5])
        .resolve(&spec)
        .unwrap();
    assert!(custom.is_layer_local());
    let a = clipped_grads(&spec, &params, &cache, &dy, Some(Clipping { plan: &lw, rule })).unwrap().0;
    let b = clipped_grads(&spec, &params, &cache, &dy, Some(Clipping { plan: &custom, rule })).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn custom_groups_validate() {
    let spec = three_layer(2);
    let bad = ClipPlan::new(Partition::Groups(vec![0, 2, 2]), ClipFunction::Vanilla, vec![1.0]);
    assert!(matches!(bad.resolve(&spec), Err(crate::Error::Config { .. })));
    let short = ClipPlan::new(Partition::Groups(vec![0, 0]), ClipFunction::Vanilla, vec![1.0]);
    assert!(short.resolve(&spec).is_err());
    let plan = ClipPlan::new(Partition::Groups(vec![0, 1, 0]), ClipFunction::Vanilla, vec![1.0, 2.0]).resolve(&spec).unwrap();
    assert_eq!(plan.members(0), vec![0, 2]);
    assert!(!plan.is_layer_local());
    let wrong_r = ClipPlan::new(Partition::LayerWise, ClipFunction::Vanilla, vec![1.0, 2.0]);
    assert!(wrong_r.resolve(&spec).is_err());
}

#[test]
fn frozen_layers_are_not_grouped() {
    let spec = NetworkSpec::new(
        vec![LayerSpec::new(3, 3, Activation::Tanh, 2).frozen(), LayerSpec::new(3, 2, Activation::Identity, 2)],
        LossKind::SquaredError,
    )
    .unwrap();
    let plan = ClipPlan::layer_wise(ClipFunction::Vanilla, 1.0).resolve(&spec).unwrap();
    assert_eq!(plan.group_of_layer, vec![None, Some(0)]);
    let (params, cache, dy) = {
        let params = init_params(&spec, 1, Precision::F64);
        let batch = Batch { inputs: randn(vec![2, 2, 3], 3), targets: Targets::Regression(randn(vec![2, 2, 2], 4)) };
        let (_, cache) = forward(&spec, &params, &batch, Precision::F64, false).unwrap();
        let (_, dy) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, Precision::F64).unwrap();
        (params, cache, dy)
    };
    let clip = Clipping { plan: &plan, rule: DispatchRule::default() };
    let (grads, _) = clipped_grads(&spec, &params, &cache, &dy, Some(clip)).unwrap();
    assert!(grads[0].is_none() && grads[1].is_none());
    assert!(grads[2].is_some() && grads[3].is_some());
}

#[test]
fn zero_sigma_is_identity() {
    let x = randn(vec![3, 4], 8);
    let out = privatize(&x, 0.0, &mut rng(1), Precision::F64).unwrap();
    assert_eq!(out, x);
}

#[test]
fn sensitivity_is_threshold_norm() {
    let plan = plan_for(ClipFunction::Vanilla, vec![3.0, 4.0], 2);
    let policy = NoisePolicy::new(0.7, NoiseMode::SharedSeed);
    assert_eq!(policy.sensitivity(&plan), 5.0);
    assert_eq!(policy.std(&plan), 3.5);
    let fixed = NoisePolicy { sensitivity: Some(2.0), ..policy };
    assert_eq!(fixed.std(&plan), 1.4);
}

#[test]
fn noise_shares_sum_to_target_variance() {
    let shared = NoisePolicy::new(1.0, NoiseMode::SharedSeed);
    let indep = NoisePolicy::new(1.0, NoiseMode::IndependentSeeds);
    assert_eq!(shared.share_std(8.0, 4), 2.0);
    assert_eq!(indep.share_std(8.0, 4), 4.0);
    assert_eq!(shared.lane(3), 0);
    assert_eq!(indep.lane(3), 3);
}

#[test]
fn privatize_std_matches_policy() {
    let plan = plan_for(ClipFunction::Vanilla, vec![1.0], 1);
    let policy = NoisePolicy::new(2.0, NoiseMode::SharedSeed);
    let zeros = Tensor::zeros(vec![100_000], Precision::F64);
    let out = privatize(&zeros, policy.std(&plan), &mut rng(4), Precision::F64).unwrap();
    let std = (out.sum_sq() / out.len() as f64).sqrt();
    assert!((std / 2.0 - 1.0).abs() < 0.02, "{std}");
}

#[test]
fn half_precision_grams_overflow() {
    let a = randn(vec![2, 3, 4], 30).map(|x| x.clamp(-1.0, 1.0));
    let g = randn(vec![2, 3, 8], 31).map(|x| 1000.0 * x.signum());
    let f16 = psg_norm_ghost_in(&a.round_to(Precision::F16), &g.round_to(Precision::F16), Precision::F16).unwrap();
    assert!(f16.overflow);
    let bf16 = psg_norm_ghost_in(&a.round_to(Precision::Bf16), &g.round_to(Precision::Bf16), Precision::Bf16).unwrap();
    assert!(!bf16.overflow);
}
