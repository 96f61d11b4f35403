//! Shared fixtures for the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use surgift_core::shift::{Dataset, Provenance, Targets};
use surgift_core::tuning::{compute_grads, evaluate, step, OptimizerConfig, Optimizer, Selector, TuningPlan, L1SP};
use surgift_core::{CheckpointMeta, Model, ModelSpec, Tensor};

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A random MLP of at most four linear layers and width at most 32, with
/// non-zero biases, plus a matching batch. Half the cases are classification.
pub fn random_mlp(rng: &mut impl Rng) -> (Model, Dataset) {
    let depth = rng.random_range(1..=4usize);
    let input = rng.random_range(1..=32usize);
    let hidden: Vec<usize> = (1..depth).map(|_| rng.random_range(1..=32)).collect();
    let classify = rng.random_bool(0.5);
    let output = if classify { rng.random_range(2..=10usize) } else { 1 };
    let blocks = if hidden.is_empty() { 0 } else { rng.random_range(1..=hidden.len()) };
    let mut model = Model::new(ModelSpec::mlp(input, hidden, output, blocks), rng).unwrap();
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            let len = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&gaussian(rng, len).iter().map(|v| 0.5 * v).collect::<Vec<_>>());
        }
    }
    let n = rng.random_range(1..=8usize);
    let x = Tensor::matrix(n, input, gaussian(rng, n * input)).unwrap();
    let targets = if classify {
        Targets::Labels {
            labels: (0..n).map(|_| rng.random_range(0..output)).collect(),
            classes: output,
        }
    } else {
        Targets::Values(gaussian(rng, n))
    };
    (model, Dataset::new(x, targets, Provenance::default()).unwrap())
}

/// Largest per-tensor relative error between tape gradients and central
/// differences, `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)`. Tensors whose gradients are both
/// below `1e-10` in norm count as exact.
pub fn gradcheck(model: &Model, batch: &Dataset, h: f64) -> f64 {
    let all = vec![true; model.params().len()];
    let (_, grads) = compute_grads(model, batch, &all).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let g = g.as_ref().unwrap();
        let mut fd = vec![0.0; g.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let orig = probe.params()[i].tensor.data()[j];
            probe.params_mut()[i].tensor.data_mut()[j] = orig + h;
            let up = evaluate(&probe, batch).unwrap().loss;
            probe.params_mut()[i].tensor.data_mut()[j] = orig - h;
            let down = evaluate(&probe, batch).unwrap().loss;
            probe.params_mut()[i].tensor.data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = norm(g).max(norm(&fd));
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A random plan over `model`: one of the named selectors or an arbitrary
/// subset of tensors, with random per-tensor rate scales.
pub fn random_plan(model: &Model, rng: &mut impl Rng) -> TuningPlan {
    let linear = model.params().iter().filter(|p| p.name.ends_with(".weight")).count();
    let selector = match rng.random_range(0..5) {
        0 => Selector::All,
        1 => Selector::LastLayer,
        2 => Selector::FirstKLayers(rng.random_range(1..=linear)),
        3 => {
            let blocks: Vec<_> = model.blocks().iter().copied().filter(|_| rng.random_bool(0.5)).collect();
            Selector::Blocks(blocks)
        }
        _ => Selector::Custom(
            model
                .params()
                .iter()
                .filter(|_| rng.random_bool(0.5))
                .map(|p| p.name.clone())
                .collect(),
        ),
    };
    let mut plan = TuningPlan::new(model, &selector).unwrap();
    for e in &mut plan.entries {
        e.lr_scale = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..=1.0) };
    }
    plan
}

/// Trains `steps` steps under a random plan and optimizer. Returns the plan
/// and whether every frozen tensor stayed bit-identical.
pub fn freeze_trial(rng: &mut impl Rng, steps: usize) -> (TuningPlan, bool) {
    let (mut model, batch) = random_mlp(rng);
    let plan = random_plan(&model, rng);
    let mut config = if rng.random_bool(0.5) {
        OptimizerConfig::sgd(rng.random_range(1e-3..1e-1))
    } else {
        OptimizerConfig::adam(rng.random_range(1e-4..1e-2))
    };
    if rng.random_bool(0.5) {
        config.weight_decay = rng.random_range(0.0..0.1);
    }
    let anchor = model.checkpoint(CheckpointMeta::default());
    let l1sp = rng.random_bool(0.5).then(|| L1SP::new(rng.random_range(0.0..0.01), &anchor, &model).unwrap());
    let before = model.clone();
    let mut opt = Optimizer::new(config).unwrap();
    for _ in 0..steps {
        step(&mut model, &plan, &mut opt, &batch, l1sp.as_ref()).unwrap();
    }
    let intact = plan
        .entries
        .iter()
        .zip(model.params().iter().zip(before.params()))
        .filter(|(e, _)| !e.trainable)
        .all(|(_, (a, b))| a.tensor.bit_eq(&b.tensor));
    (plan, intact)
}
