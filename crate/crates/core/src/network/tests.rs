use super::*;

const P: Precision = Precision::F64;

fn t3(shape: [usize; 3], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data, P).unwrap()
}

fn random_tensor(rng: &mut RngStream, shape: Vec<usize>) -> Tensor {
    gaussian(rng, shape, 1.0)
}

fn test_rng(seed: u64) -> RngStream {
    RngStream::new(seed, StreamId::new(0, Purpose::Test, 0))
}

fn two_layer(seed: u64, b: usize, t: usize) -> (NetworkSpec, Vec<LayerParams>, Batch) {
    let spec = NetworkSpec::new(
        vec![LayerSpec::new(3, 4, Activation::Tanh, t), LayerSpec::new(4, 2, Activation::Identity, t)],
        LossKind::SquaredError,
    )
    .unwrap();
    let params = init_params(&spec, seed, P);
    let mut rng = test_rng(seed);
    let batch = Batch {
        inputs: random_tensor(&mut rng, vec![b, t, 3]),
        targets: Targets::Regression(random_tensor(&mut rng, vec![b, t, 2])),
    };
    (spec, params, batch)
}

fn total_loss(spec: &NetworkSpec, params: &[LayerParams], batch: &Batch, weights: &[f64]) -> f64 {
    let (losses, _) = forward(spec, params, batch, P, false).unwrap();
    losses.data().iter().zip(weights).map(|(l, w)| l * w).sum()
}

#[test]
fn identity_layer_zero_loss() {
    let spec = NetworkSpec::new(vec![LayerSpec::new(2, 2, Activation::Identity, 3)], LossKind::SquaredError).unwrap();
    let params = vec![LayerParams {
        weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], P).unwrap(),
        bias: Tensor::zeros(vec![2], P),
    }];
    let x = t3([2, 3, 2], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
    let batch = Batch { inputs: x.clone(), targets: Targets::Regression(x) };
    let (losses, _) = forward(&spec, &params, &batch, P, false).unwrap();
    assert_eq!(losses.data(), &[0.0, 0.0]);
}

#[test]
fn hand_computed_two_by_two() {
    // x = [1, 2], W = [[1, 2], [3, 4]], b = [0.5, -1]
    // s = [1 + 6 + 0.5, 2 + 8 - 1] = [7.5, 9]; target [7, 10]
    // L = ½ (0.5² + 1²) = 0.625
    let spec = NetworkSpec::new(vec![LayerSpec::new(2, 2, Activation::Identity, 1)], LossKind::SquaredError).unwrap();
    let params = vec![LayerParams {
        weight: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], P).unwrap(),
        bias: Tensor::new(vec![2], vec![0.5, -1.0], P).unwrap(),
    }];
    let batch = Batch {
        inputs: t3([1, 1, 2], vec![1.0, 2.0]),
        targets: Targets::Regression(t3([1, 1, 2], vec![7.0, 10.0])),
    };
    let (losses, cache) = forward(&spec, &params, &batch, P, false).unwrap();
    assert_eq!(losses.data(), &[0.625]);
    assert_eq!(cache.output().unwrap().data(), &[7.5, 9.0]);

    // ∂L/∂s = [0.5, -1]; gW = xᵀ g = [[0.5, -1], [1, -2]]
    let (_, g_out) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, P).unwrap();
    let grads = backward_output_grads(&spec, &params, &cache, &g_out).unwrap();
    assert_eq!(grads[0].data(), &[0.5, -1.0]);
    let (gw, gb) = param_grad(cache.input(0).unwrap(), &grads[0], &[1.0], P).unwrap();
    assert_eq!(gw.data(), &[0.5, -1.0, 1.0, -2.0]);
    assert_eq!(gb.data(), &[0.5, -1.0]);
}

#[test]
fn checkpointing_is_bitwise_transparent() {
    let (spec, params, batch) = two_layer(11, 3, 4);
    let (l1, c1) = forward(&spec, &params, &batch, P, false).unwrap();
    let (l2, c2) = forward(&spec, &params, &batch, P, true).unwrap();
    assert_eq!(l1, l2);
    assert!(c2.stored_elements() < c1.stored_elements());
    let (_, g) = loss_and_grad(spec.loss, c1.output().unwrap(), &batch.targets, 1.0, P).unwrap();
    let g1 = backward_output_grads(&spec, &params, &c1, &g).unwrap();
    let g2 = backward_output_grads(&spec, &params, &c2, &g).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        let bits_a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn identity_single_layer_output_grad_is_loss_grad() {
    let spec = NetworkSpec::new(vec![LayerSpec::new(3, 2, Activation::Identity, 2)], LossKind::SquaredError).unwrap();
    let params = init_params(&spec, 3, P);
    let mut rng = test_rng(3);
    let batch = Batch {
        inputs: random_tensor(&mut rng, vec![2, 2, 3]),
        targets: Targets::Regression(random_tensor(&mut rng, vec![2, 2, 2])),
    };
    let (_, cache) = forward(&spec, &params, &batch, P, false).unwrap();
    let (_, g) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, P).unwrap();
    let grads = backward_output_grads(&spec, &params, &cache, &g).unwrap();
    assert_eq!(grads[0], g);
}

#[test]
fn relu_with_negative_preactivations_blocks_gradient() {
    let spec = NetworkSpec::new(
        vec![LayerSpec::new(2, 3, Activation::Relu, 1), LayerSpec::new(3, 1, Activation::Identity, 1)],
        LossKind::SquaredError,
    )
    .unwrap();
    let mut params = init_params(&spec, 5, P);
    params[0].bias = Tensor::new(vec![3], vec![-100.0; 3], P).unwrap();
    let batch = Batch {
        inputs: t3([2, 1, 2], vec![0.1, 0.2, -0.3, 0.4]),
        targets: Targets::Regression(t3([2, 1, 1], vec![1.0, 2.0])),
    };
    let (_, cache) = forward(&spec, &params, &batch, P, false).unwrap();
    let (_, g) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, P).unwrap();
    let grads = backward_output_grads(&spec, &params, &cache, &g).unwrap();
    assert!(grads[0].data().iter().all(|&x| x == 0.0));
    assert!(grads[1].data().iter().any(|&x| x != 0.0));
}

#[test]
fn incomplete_cache_is_a_contract_violation() {
    let (spec, params, batch) = two_layer(2, 2, 2);
    let mut cache = ActivationCache::new(batch.inputs.clone(), false, P);
    cache.forward_layer(&spec.layers[0], &params[0]).unwrap();
    let g = Tensor::zeros(vec![2, 2, 2], P);
    assert!(matches!(
        backward_output_grads(&spec, &params, &cache, &g),
        Err(Error::Contract(_))
    ));
}

/// Loss as a function of a perturbed pre-activation `s_l`.
fn loss_from_pre(spec: &NetworkSpec, params: &[LayerParams], batch: &Batch, l: usize, s: &Tensor) -> f64 {
    let mut a = s.map(|x| spec.layers[l].activation.apply(x));
    for k in l + 1..spec.num_layers() {
        let s_k = pre_activation(&a, &params[k], P).unwrap();
        a = s_k.map(|x| spec.layers[k].activation.apply(x));
    }
    let (losses, _) = loss_and_grad(spec.loss, &a, &batch.targets, 1.0, P).unwrap();
    losses.data().iter().sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

#[test]
fn output_grads_match_central_differences() {
    let h = 1e-5;
    for seed in 0..5 {
        let (spec, params, batch) = two_layer(100 + seed, 2, 3);
        let (_, cache) = forward(&spec, &params, &batch, P, false).unwrap();
        let (_, g) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, P).unwrap();
        let grads = backward_output_grads(&spec, &params, &cache, &g).unwrap();
        for l in 0..spec.num_layers() {
            let s = cache.pre_activation(l, &params[l]).unwrap();
            let fd: Vec<f64> = (0..s.len())
                .map(|j| {
                    let mut up = s.data().to_vec();
                    let mut down = up.clone();
                    up[j] += h;
                    down[j] -= h;
                    let up = Tensor::new(s.shape().to_vec(), up, P).unwrap();
                    let down = Tensor::new(s.shape().to_vec(), down, P).unwrap();
                    (loss_from_pre(&spec, &params, &batch, l, &up) - loss_from_pre(&spec, &params, &batch, l, &down))
                        / (2.0 * h)
                })
                .collect();
            let err = rel_err(grads[l].data(), &fd);
            assert!(err < 1e-6, "layer {l} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn param_grad_matches_finite_differences_with_weights() {
    let h = 1e-5;
    let (spec, params, batch) = two_layer(7, 3, 2);
    let weights = [0.3, -1.2, 2.0];
    let (_, cache) = forward(&spec, &params, &batch, P, false).unwrap();
    let (_, g) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, P).unwrap();
    let grads = backward_output_grads(&spec, &params, &cache, &g).unwrap();
    for l in 0..2 {
        let (gw, gb) = param_grad(cache.input(l).unwrap(), &grads[l], &weights, P).unwrap();
        for (kind, analytic) in [(ParamKind::Weight, gw), (ParamKind::Bias, gb)] {
            let base = params[l].tensor(kind).data().to_vec();
            let fd: Vec<f64> = (0..base.len())
                .map(|j| {
                    let eval = |delta: f64| {
                        let mut p = params.clone();
                        let mut v = base.clone();
                        v[j] += delta;
                        let t = Tensor::new(params[l].tensor(kind).shape().to_vec(), v, P).unwrap();
                        match kind {
                            ParamKind::Weight => p[l].weight = t,
                            ParamKind::Bias => p[l].bias = t,
                        }
                        total_loss(&spec, &p, &batch, &weights)
                    };
                    (eval(h) - eval(-h)) / (2.0 * h)
                })
                .collect();
            let err = rel_err(analytic.data(), &fd);
            assert!(err < 1e-6, "layer {l} {kind:?}: rel err {err}");
        }
    }
}

#[test]
fn one_hot_scale_selects_sample() {
    let (spec, params, batch) = two_layer(9, 3, 2);
    let (_, cache) = forward(&spec, &params, &batch, P, false).unwrap();
    let (_, g) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, P).unwrap();
    let grads = backward_output_grads(&spec, &params, &cache, &g).unwrap();
    let a = cache.input(1).unwrap();
    let (gw, gb) = param_grad(a, &grads[1], &[0.0, 1.0, 0.0], P).unwrap();

    let single = batch.slice(1, 1).unwrap();
    let (_, c1) = forward(&spec, &params, &single, P, false).unwrap();
    let (_, g1) = loss_and_grad(spec.loss, c1.output().unwrap(), &single.targets, 1.0, P).unwrap();
    let gr1 = backward_output_grads(&spec, &params, &c1, &g1).unwrap();
    let (gw1, gb1) = param_grad(c1.input(1).unwrap(), &gr1[1], &[1.0], P).unwrap();
    assert_eq!(gw, gw1);
    assert_eq!(gb, gb1);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let t = 2;
    let spec = NetworkSpec::new(vec![LayerSpec::new(3, 4, Activation::Identity, t)], LossKind::CrossEntropy).unwrap();
    let params = init_params(&spec, 21, P);
    let mut rng = test_rng(21);
    let batch = Batch { inputs: random_tensor(&mut rng, vec![2, t, 3]), targets: Targets::Classes(vec![0, 3, 2, 1]) };
    let (_, cache) = forward(&spec, &params, &batch, P, false).unwrap();
    let (_, g) = loss_and_grad(spec.loss, cache.output().unwrap(), &batch.targets, 1.0, P).unwrap();
    let s = cache.pre_activation(0, &params[0]).unwrap();
    let h = 1e-5;
    let fd: Vec<f64> = (0..s.len())
        .map(|j| {
            let bump = |delta: f64| {
                let mut v = s.data().to_vec();
                v[j] += delta;
                loss_from_pre(&spec, &params, &batch, 0, &Tensor::new(s.shape().to_vec(), v, P).unwrap())
            };
            (bump(h) - bump(-h)) / (2.0 * h)
        })
        .collect();
    assert!(rel_err(g.data(), &fd) < 1e-6);
}

#[test]
fn psi_counts_respect_trainable_mask() {
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::new(4, 3, Activation::Relu, 2).frozen(),
            LayerSpec::new(3, 2, Activation::Identity, 2).with_trainable(Trainable { weight: false, bias: true }),
        ],
        LossKind::SquaredError,
    )
    .unwrap();
    assert_eq!(spec.psi_model(), 4 * 3 + 3 + 3 * 2 + 2);
    assert_eq!(spec.psi_train(), 2);
    assert_eq!(spec.trainable_layers(), vec![1]);
}

#[test]
fn mismatched_layers_rejected() {
    let err = NetworkSpec::new(
        vec![LayerSpec::new(4, 3, Activation::Relu, 2), LayerSpec::new(2, 2, Activation::Identity, 2)],
        LossKind::SquaredError,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config { ref path, .. } if path == "network.layers[1].d_in"));
}
