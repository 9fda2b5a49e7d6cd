use super::*;
use crate::amp::ScalingPipeline;
use crate::dp::{ClipFunction, ClipPlan, DispatchRule, NoiseMode, NoisePolicy};
use crate::network::{Activation, LayerSpec, LossKind, NetworkSpec, Trainable};
use crate::zero::{DataSpec, OptimizerSpec, Simulator, TrainSetup};

fn unit(dp: bool) -> CostInputs {
    CostInputs::new(1.0, 1.0, 1.0, 1, Stage::Zero2, dp)
}

#[test]
fn unit_substitution() {
    let f = time_components(&unit(true));
    assert_eq!((f.forward, f.output_grad, f.param_grad, f.dp_overhead), (2.0, 2.0, 2.0, 0.666));
    assert_eq!(f.attention, 0.0);
    assert_eq!(time_components(&unit(false)).dp_overhead, 0.0);
}

#[test]
fn full_training_compute() {
    let mut input = CostInputs::new(4.0, 128.0, 1e6, 1, Stage::Ddp, true);
    let btp = 4.0 * 128.0 * 1e6;
    assert_eq!(time_components(&input).total(), 6.0 * btp + 0.666 * btp);
    input.attention_coeff = Some(3.0);
    assert_eq!(time_components(&input).attention, 3.0 * 4.0 * 128.0 * 128.0);
}

#[test]
fn peft_limit_backward_is_output_grads() {
    let mut input = CostInputs::new(2.0, 8.0, 1e6, 1, Stage::Zero1, true);
    input.psi_train = Some(0.0);
    let f = time_components(&input);
    assert_eq!(f.backward(), 2.0 * 2.0 * 8.0 * 1e6);
    assert_eq!(f.dp_overhead, 0.0);
    assert_eq!(relative_speed(&input), 1.0);
    assert!(input.peft());
}

#[test]
fn relative_speed_examples() {
    let input = CostInputs::new(4.0, 64.0, 1e6, 1, Stage::Ddp, true);
    let ratio = relative_speed(&input);
    assert!((ratio - 6.0 / 6.666).abs() < 1e-12);
    assert!((ratio - 0.900).abs() < 1e-3);
    assert_eq!(relative_speed(&CostInputs { dp_enabled: false, ..input.clone() }), 1.0);

    let mut slow = CostInputs::new(4.0, 64.0, 1e6, 64, Stage::Zero3, true);
    let mut last = 0.0;
    for gbps in [1e3, 1.0, 1e-3, 1e-6, 1e-9] {
        slow.bandwidth = Bandwidth { intra_gbps: gbps, inter_gbps: gbps, workers_per_node: 8 };
        let r = relative_speed(&slow);
        assert!(r >= last && r <= 1.0);
        last = r;
    }
    assert!(1.0 - last < 1e-6);
}

#[test]
fn relative_speed_non_increasing_in_overhead() {
    let mut input = CostInputs::new(4.0, 64.0, 1e6, 16, Stage::Zero2, true);
    let mut last = 1.0;
    for c in [0.0, 0.1, 0.666, 1.0, 5.0] {
        input.dp_overhead_coeff = c;
        let r = relative_speed(&input);
        assert!(r <= last && r > 0.0);
        last = r;
    }
}

#[test]
fn checkpointing_doubles_forward() {
    let mut input = CostInputs::new(4.0, 64.0, 1e6, 1, Stage::Zero3, false);
    let plain = time_components(&input);
    input.checkpointing = true;
    let ckpt = time_components(&input);
    assert_eq!(ckpt.forward, 2.0 * plain.forward);
    assert_eq!(plain.total() / ckpt.total(), 0.75);
}

#[test]
fn comm_volume_examples() {
    let psi = 1e9;
    let v = |stage, workers| comm_volume(&CostInputs::new(1.0, 1.0, psi, workers, stage, true)).elements;
    assert_eq!(v(Stage::Ddp, 8), 2.0 * psi);
    assert_eq!(v(Stage::Zero1, 8), 2.0 * psi);
    assert_eq!(v(Stage::Zero2, 8), 2.0 * psi);
    assert_eq!(v(Stage::Zero3, 8), 3.0 * psi);
    assert_eq!(v(Stage::Zero3, 8) / v(Stage::Zero2, 8), 1.5);
    for stage in Stage::ALL {
        assert_eq!(v(stage, 1), 0.0);
    }

    let mut peft = CostInputs::new(1.0, 1.0, psi, 8, Stage::Zero2, true);
    peft.psi_train = Some(1e-3 * psi);
    assert!((v(Stage::Zero2, 8) / comm_volume(&peft).elements - 1000.0).abs() < 1e-9);
}

#[test]
fn comm_seconds_switch_to_inter_node() {
    let mut input = CostInputs::new(1.0, 1.0, 1e9, 8, Stage::Zero1, true);
    input.bandwidth = Bandwidth { intra_gbps: 100.0, inter_gbps: 10.0, workers_per_node: 8 };
    let intra = comm_volume(&input);
    assert_eq!(intra.bytes, 4e9);
    assert_eq!(intra.seconds, 0.04);
    input.workers = 9;
    assert_eq!(comm_volume(&input).seconds, 0.4);
}

#[test]
fn memory_and_capacity_columns() {
    let mut input = CostInputs::new(1.0, 1.0, 1e9, 64, Stage::Zero3, true);
    input.memory_budget_gb = Some(32.0);
    let r = report(&input).unwrap();
    assert_eq!(r.memory_bytes, 16e9 / 64.0);
    assert_eq!(r.max_trainable_params, Some(128e9));
}

#[test]
fn invalid_inputs_are_config_errors() {
    let mut input = unit(true);
    input.psi_train = Some(2.0);
    assert!(matches!(report(&input), Err(Error::Config { .. })));
    let mut input = unit(true);
    input.dp_overhead_coeff = -1.0;
    assert!(report(&input).is_err());
    let mut input = unit(true);
    input.bytes_per_element = 3;
    assert!(report(&input).is_err());
}

#[test]
fn sweep_expands_in_order() {
    let config = CostConfig {
        base: CostInputs::new(1.0, 1.0, 1e9, 64, Stage::Ddp, true),
        sweep: Sweep { stage: vec![Stage::Zero1, Stage::Zero2], workers: vec![8, 64], ..Sweep::default() },
    };
    let rows = config.rows().unwrap();
    let keys: Vec<_> = rows.iter().map(|r| (r.stage, r.workers)).collect();
    assert_eq!(keys, vec![(1, 8), (1, 64), (2, 8), (2, 64)]);
    let single = CostConfig { base: unit(true), sweep: Sweep::default() }.rows().unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!((single[0].batch, single[0].psi_model, single[0].psi_train), (1.0, 1.0, 1.0));
}

fn tiny_setup(spec: NetworkSpec, stage: Stage, workers: usize, accumulation: usize) -> TrainSetup {
    TrainSetup {
        spec,
        data: DataSpec::new(5),
        stage,
        workers,
        micro_batch: 2,
        accumulation,
        clip: ClipPlan::layer_wise(ClipFunction::Vanilla, 1.0),
        noise: NoisePolicy::new(0.5, NoiseMode::SharedSeed),
        optimizer: OptimizerSpec::adam(1e-3),
        amp: ScalingPipeline::unscaled_dp(),
        precision: crate::numerics::Precision::F64,
        checkpointing: false,
        dispatch: DispatchRule::default(),
        seed: 9,
    }
}

#[test]
fn simulator_volumes_match_model() {
    let full = NetworkSpec::new(
        vec![LayerSpec::new(6, 4, Activation::Tanh, 3), LayerSpec::new(4, 2, Activation::Identity, 3)],
        LossKind::SquaredError,
    )
    .unwrap();
    let peft = NetworkSpec::new(
        vec![
            LayerSpec::new(6, 4, Activation::Tanh, 3).frozen(),
            LayerSpec::new(4, 2, Activation::Identity, 3).with_trainable(Trainable { weight: false, bias: true }),
        ],
        LossKind::SquaredError,
    )
    .unwrap();
    for spec in [full, peft] {
        for stage in Stage::ALL {
            for workers in [1, 2, 4] {
                for accumulation in [1, 2] {
                    let mut sim = Simulator::new(tiny_setup(spec.clone(), stage, workers, accumulation)).unwrap();
                    sim.train_step().unwrap();
                    let mut input = CostInputs::new(2.0, 3.0, spec.psi_model() as f64, workers, stage, true);
                    input.psi_train = Some(spec.psi_train() as f64);
                    input.accumulation = accumulation;
                    assert_eq!(
                        sim.log().step_volume(0) as f64,
                        comm_volume(&input).elements,
                        "stage {stage} workers {workers} accumulation {accumulation} train {}",
                        spec.psi_train()
                    );
                }
            }
        }
    }
}
