mod common;

use cff::pipeline::{first_difference, run_pipeline_epoch, step_count_model, PipelineError, StageState};
use cff_core::data::Split;
use cff_core::models::{MlpSpec, ModelSpec};
use cff_core::training::{
    prepare_data, train_cff_batch, Algorithm, DatasetKind, ExperimentConfig, ForwardMode, Trainer,
};
use cff_core::Tensor;
use proptest::prelude::*;

struct Setup {
    start: Vec<StageState>,
    trainer: Trainer,
    batches: Vec<(Tensor<f32>, Vec<usize>)>,
}

fn setup(layers: usize, n: usize, alg: Algorithm, seed: u64) -> Setup {
    let mut cfg = ExperimentConfig::new(alg, DatasetKind::Mnist, ModelSpec::Mlp(MlpSpec { units: 12, layers }), 1);
    cfg.batch_size = 16;
    cfg.forward_mode = ForwardMode::One;
    cfg.seed = seed;
    let train = common::synthetic_mnist(16 * n + 40, seed, Split::Train);
    let test = common::synthetic_mnist(10, 2, Split::Test);
    let data = prepare_data(&cfg, &train, &test).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    let order = trainer.epoch_order(data.train.len());
    let batches = order[..n]
        .iter()
        .map(|idx| trainer.prepare_batch(&data.train, &data.normalization, idx).unwrap())
        .collect();
    let start = trainer.encoder.layers.clone().into_iter().zip(trainer.optimizers.clone()).collect();
    Setup { start, trainer, batches }
}

fn sequential(s: &Setup) -> Vec<StageState> {
    let mut enc = s.trainer.encoder.clone();
    let mut opts = s.trainer.optimizers.clone();
    for (x, y) in s.batches.clone() {
        train_cff_batch(&mut enc, &mut opts, x, &y, s.trainer.cff_config()).unwrap();
    }
    enc.layers.into_iter().zip(opts).collect()
}

#[test]
fn four_layers_ten_batches_take_thirteen_steps() {
    let s = setup(4, 10, Algorithm::CffM, 1);
    let (_, stats) = run_pipeline_epoch(s.start.clone(), s.batches.clone(), s.trainer.cff_config(), 4).unwrap();
    assert_eq!(stats.steps, 13);
    assert_eq!(stats.steps, step_count_model(4, 10).0);
    assert!(stats.stages.iter().all(|st| st.busy == 10 && st.idle == 3));
}

#[test]
fn one_layer_is_sequential() {
    let s = setup(1, 6, Algorithm::Cff, 2);
    let (out, stats) = run_pipeline_epoch(s.start.clone(), s.batches.clone(), s.trainer.cff_config(), 1).unwrap();
    assert_eq!(stats.steps, 6);
    assert_eq!(first_difference(&out, &sequential(&s)), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matches_sequential_for_any_worker_count(
        layers in 1usize..=4,
        n in 1usize..=6,
        workers in 1usize..=5,
        seed in any::<u64>(),
        margins in any::<bool>(),
    ) {
        let alg = if margins { Algorithm::CffM } else { Algorithm::Cff };
        let s = setup(layers, n, alg, seed);
        let (out, stats) = run_pipeline_epoch(s.start.clone(), s.batches.clone(), s.trainer.cff_config(), workers).unwrap();
        prop_assert_eq!(first_difference(&out, &sequential(&s)), None);
        prop_assert_eq!(stats.steps, (layers + n - 1) as u64);
        prop_assert_eq!(stats.workers, workers.min(layers));
        for st in &stats.stages {
            prop_assert_eq!(st.busy, n as u64);
            prop_assert_eq!(st.busy + st.idle, stats.steps);
        }
    }
}

#[test]
fn a_failing_stage_is_named_with_its_batch() {
    let mut s = setup(3, 5, Algorithm::CffM, 4);
    s.batches[3].1.pop();
    let err = run_pipeline_epoch(s.start.clone(), s.batches, s.trainer.cff_config(), 2).unwrap_err();
    match &err {
        PipelineError::StageFailed { stage, batch, .. } => assert_eq!((*stage, *batch), (0, 3)),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("stage 0 failed on batch 3"), "{err}");
}

#[test]
fn differences_are_located() {
    let s = setup(2, 2, Algorithm::Cff, 5);
    let mut other = s.start.clone();
    assert_eq!(first_difference(&s.start, &other), None);
    other[1].0.tensors_mut()[0].data_mut()[3] += 1e-7;
    assert_eq!(first_difference(&s.start, &other).as_deref(), Some("layer2.w"));
}
