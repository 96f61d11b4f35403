use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use surgift_bench::mlp_fixture;
use surgift_core::harness::theory::START_STEP;
use surgift_core::select::snr;
use surgift_core::shift::make_theorem1_instance;
use surgift_core::theory::{pretrain_theorem1, run_flow, select_step_size, FlowConfig, FlowMode};
use surgift_core::tta::{adapt_and_predict, Augmentation, TtaConfig, TtaMode};
use surgift_core::tuning::{compute_grads, per_example_grads, step, Optimizer, OptimizerConfig, Selector, TuningPlan};
use surgift_core::{seed, BlockId};

fn training(c: &mut Criterion) {
    let (model, batch) = mlp_fixture(32);
    let all = vec![true; model.params().len()];
    c.bench_function("forward/batch32", |b| b.iter(|| model.forward(black_box(batch.inputs())).unwrap()));
    c.bench_function("grads/batch32", |b| b.iter(|| compute_grads(&model, black_box(&batch), &all).unwrap()));

    let first = TuningPlan::new(&model, &Selector::Blocks(vec![BlockId::Hidden(0)])).unwrap();
    let mask = first.trainable_mask();
    c.bench_function("grads/batch32/block0-only", |b| {
        b.iter(|| compute_grads(&model, black_box(&batch), &mask).unwrap())
    });

    let plan = TuningPlan::all(&model);
    c.bench_function("adam-step/batch32", |b| {
        b.iter_batched(
            || (model.clone(), Optimizer::new(OptimizerConfig::adam(1e-3)).unwrap()),
            |(mut m, mut opt)| step(&mut m, &plan, &mut opt, &batch, None).unwrap(),
            BatchSize::SmallInput,
        )
    });

    let small = batch.subset(&(0..8).collect::<Vec<_>>()).unwrap();
    c.bench_function("snr/per-example-8", |b| {
        b.iter(|| {
            let g = per_example_grads(&model, &small).unwrap();
            g.iter().map(|t| snr(t).unwrap()).sum::<f64>()
        })
    });
}

fn tta(c: &mut Criterion) {
    let (model, batch) = mlp_fixture(1);
    let config = TtaConfig {
        plan: TuningPlan::new(&model, &Selector::Blocks(vec![BlockId::Hidden(0)])).unwrap(),
        mode: TtaMode::Online,
        augmentations: 8,
        steps_per_input: 1,
        lr: 1e-2,
        augmentation: Augmentation {
            noise_std: 0.3,
            jitter: 0.1,
        },
        seed: 0,
    };
    c.bench_function("tta/adapt-one-input", |b| {
        b.iter_batched(
            || (model.clone(), Optimizer::new(config.optimizer()).unwrap()),
            |(mut m, mut opt)| adapt_and_predict(&mut m, &config, &mut opt, batch.x(0)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn theory(c: &mut Criterion) {
    let inst = make_theorem1_instance(64, 40, 1, 35, 0).unwrap();
    let net = pretrain_theorem1(&inst, 1.0, 0.125, &mut seed::rng(0)).unwrap();
    let eta = select_step_size(&net, FlowMode::Ft, &inst.target, START_STEP).unwrap();
    let config = FlowConfig::new(eta, 1000, 100);
    c.bench_function("flow/ft-1000-steps", |b| {
        b.iter(|| run_flow(&net, FlowMode::Ft, &inst.target, None, &config).unwrap())
    });
}

criterion_group!(benches, training, tta, theory);
criterion_main!(benches);
