use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss;
use crate::model::{argmax, Checkpoint, CheckpointMeta, Model};
use crate::select::{self, Criterion, CriterionTrace};
use crate::seed;
use crate::shift::{Dataset, Targets};
use crate::tensor::{l2_norm, Tensor};

use super::{Optimizer, OptimizerConfig, TuningPlan, L1SP};

/// Records the batch loss: cross-entropy for labels, squared error for values.
pub fn loss_on(model: &Model, tape: &mut Tape, params: &crate::model::BoundParams, batch: &Dataset) -> Result<Var> {
    let x = tape.constant(batch.inputs().clone())?;
    let out = model.forward_on(tape, params, x)?;
    match batch.targets() {
        Targets::Labels { labels, .. } => loss::cross_entropy_on(tape, out, labels),
        Targets::Values(v) => {
            let y = tape.constant(Tensor::matrix(v.len(), 1, v.clone())?)?;
            loss::squared_loss_on(tape, out, y)
        }
    }
}

/// Batch loss and gradients of the tensors with `differentiable[i]`; the
/// others get `None`.
pub fn compute_grads(model: &Model, batch: &Dataset, differentiable: &[bool]) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let bound = model.bind_masked(&mut tape, differentiable)?;
    let l = loss_on(model, &mut tape, &bound, batch)?;
    let value = tape.value(l).data()[0];
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss is {value}")));
    }
    let mut grads = tape.backward(l)?;
    let out = model
        .params()
        .iter()
        .zip(&bound.vars)
        .zip(differentiable)
        .map(|((p, &v), &d)| d.then(|| grads.take(v).unwrap_or_else(|| vec![0.0; p.tensor.len()])))
        .collect();
    Ok((value, out))
}

/// Gradients of every tensor for each example separately:
/// `result[tensor][example]` is a flattened gradient.
pub fn per_example_grads(model: &Model, batch: &Dataset) -> Result<Vec<Vec<Vec<f64>>>> {
    let all = vec![true; model.params().len()];
    let mut out = vec![Vec::with_capacity(batch.len()); all.len()];
    for i in 0..batch.len() {
        let (_, grads) = compute_grads(model, &batch.subset(&[i])?, &all)?;
        for (slot, g) in out.iter_mut().zip(grads) {
            slot.push(g.expect("all tensors differentiated"));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    /// Gradient norm per tensor; `None` for frozen tensors.
    pub grad_norms: Vec<Option<f64>>,
}

/// One optimizer update on `batch`. Only trainable tensors are differentiated.
pub fn step(
    model: &mut Model,
    plan: &TuningPlan,
    optimizer: &mut Optimizer,
    batch: &Dataset,
    regularizer: Option<&L1SP>,
) -> Result<StepMetrics> {
    plan.check(model)?;
    let (loss, mut grads) = compute_grads(model, batch, &plan.trainable_mask())?;
    let grad_norms = grads.iter().map(|g| g.as_deref().map(l2_norm)).collect();
    if let Some(r) = regularizer {
        r.add_to(model, plan, &mut grads);
    }
    optimizer.step(model, plan, &grads)?;
    Ok(StepMetrics { loss, grad_norms })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl Evaluation {
    /// Accuracy for classification, loss for regression.
    pub fn metric(&self) -> f64 {
        self.accuracy.unwrap_or(self.loss)
    }

    /// True when `self` is strictly better than `other`.
    pub fn beats(&self, other: &Evaluation) -> bool {
        match (self.accuracy, other.accuracy) {
            (Some(a), Some(b)) => a > b,
            _ => self.loss < other.loss,
        }
    }
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Evaluation> {
    let out = model.forward(ds.inputs())?;
    match ds.targets() {
        Targets::Labels { labels, .. } => {
            let loss = loss::cross_entropy_loss(&out, labels)?;
            let correct = labels.iter().enumerate().filter(|&(i, &y)| argmax(out.row(i)) == y).count();
            Ok(Evaluation {
                loss,
                accuracy: Some(correct as f64 / labels.len() as f64),
            })
        }
        Targets::Values(v) => {
            let y = Tensor::matrix(v.len(), 1, v.clone())?;
            Ok(Evaluation {
                loss: loss::squared_loss(&out, &y)?,
                accuracy: None,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AutoSelect {
    Rgn,
    Snr { tau: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub l1sp: Option<f64>,
    #[serde(default)]
    pub auto: Option<AutoSelect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training batch loss; absent for the pretrained evaluation.
    pub train_loss: Option<f64>,
    pub val: Evaluation,
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val: Evaluation,
    pub curves: Vec<EpochRecord>,
    pub trace: Option<CriterionTrace>,
    /// Tensors trainable in at least one epoch, in parameter order.
    pub tuned: Vec<String>,
    pub steps: u64,
}

/// Fine-tunes `model` on `train` and keeps the checkpoint with the best
/// validation metric over epoch boundaries, epoch 0 being the starting point.
/// Ties keep the earlier epoch. `model` ends holding the last-epoch weights.
pub fn fine_tune(
    model: &mut Model,
    plan: &TuningPlan,
    optimizer: &OptimizerConfig,
    train: &Dataset,
    val: &Dataset,
    config: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    plan.check(model)?;
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut plan = plan.clone();
    let mut opt = Optimizer::new(optimizer.clone())?;
    let anchor = model.checkpoint(CheckpointMeta {
        seed: config.seed,
        ..Default::default()
    });
    let l1sp = match config.l1sp {
        Some(lambda) => Some(L1SP::new(lambda, &anchor, model)?),
        None => None,
    };
    let names: Vec<String> = plan.entries.iter().map(|e| e.name.clone()).collect();
    let mut trace = config.auto.map(|a| {
        let c = match a {
            AutoSelect::Rgn => Criterion::Rgn,
            AutoSelect::Snr { .. } => Criterion::Snr,
        };
        CriterionTrace::new(c, names.clone())
    });
    if let Some(AutoSelect::Snr { tau }) = config.auto {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("SNR threshold must lie in [0, 1], got {tau}")));
        }
    }

    let first = evaluate(model, val)?;
    let mut curves = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val: first,
    }];
    let mut best = anchor;
    let mut best_epoch = 0;
    let mut best_val = first;
    let mut tuned = vec![false; names.len()];
    let mut rng = seed::rng(seed::derive(config.seed, &["fine_tune", "shuffle"]));
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        plan.apply_schedule(epoch - 1);
        order.shuffle(&mut rng);
        let batches: Vec<Dataset> = order
            .chunks(config.batch_size)
            .map(|idx| train.subset(idx))
            .collect::<Result<_>>()?;

        match (config.auto, trace.as_mut()) {
            (Some(AutoSelect::Snr { tau }), Some(tr)) => {
                let per_input = per_example_grads(model, &batches[0])?;
                let values = per_input
                    .iter()
                    .zip(&names)
                    .map(|(g, name)| {
                        select::snr(g).map_err(|e| Error::invalid(format!("SNR of `{name}`: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                tr.record(&values)?;
                let normalized = tr.close_epoch(epoch)?;
                plan = select::auto_snr_freeze(&normalized, &plan, tau)?;
            }
            (Some(AutoSelect::Rgn), Some(tr)) if epoch == 1 => {
                let (_, grads) = compute_grads(model, &batches[0], &vec![true; names.len()])?;
                tr.record(&rgn_values(model, &grads)?)?;
                plan = select::auto_rgn_epoch_update(tr, &plan, 0)?;
            }
            _ => {}
        }
        for (t, e) in tuned.iter_mut().zip(&plan.entries) {
            *t |= e.trainable;
        }

        let mut total = 0.0;
        for batch in &batches {
            let mask = match config.auto {
                Some(AutoSelect::Rgn) => vec![true; names.len()],
                _ => plan.trainable_mask(),
            };
            let (loss, mut grads) = compute_grads(model, batch, &mask)?;
            if let (Some(AutoSelect::Rgn), Some(tr)) = (config.auto, trace.as_mut()) {
                tr.record(&rgn_values(model, &grads)?)?;
            }
            if let Some(r) = &l1sp {
                r.add_to(model, &plan, &mut grads);
            }
            opt.step(model, &plan, &grads)?;
            total += loss;
        }
        if let (Some(AutoSelect::Rgn), Some(tr)) = (config.auto, trace.as_mut()) {
            plan = select::auto_rgn_epoch_update(tr, &plan, epoch)?;
        }

        let val_eval = evaluate(model, val)?;
        curves.push(EpochRecord {
            epoch,
            train_loss: Some(total / batches.len() as f64),
            val: val_eval,
        });
        if val_eval.beats(&best_val) {
            best_val = val_eval;
            best_epoch = epoch;
            best = model.checkpoint(CheckpointMeta {
                seed: config.seed,
                step: opt.steps(),
                source_loss: None,
            });
        }
    }

    Ok(FineTuneOutcome {
        best,
        best_epoch,
        best_val,
        curves,
        trace,
        tuned: names.into_iter().zip(tuned).filter(|(_, t)| *t).map(|(n, _)| n).collect(),
        steps: opt.steps(),
    })
}

fn rgn_values(model: &Model, grads: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
    model
        .params()
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let g = g.as_ref().ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            select::rgn(g, p.tensor.data()).map_err(|e| match e {
                Error::ZeroNorm(_) => Error::ZeroNorm(p.name.clone()),
                other => other,
            })
        })
        .collect()
}

/// Names of tensors whose values differ between two models of the same shape.
pub fn changed_tensors(a: &Model, b: &Model) -> BTreeSet<String> {
    a.params()
        .iter()
        .zip(b.params())
        .filter(|(x, y)| !x.tensor.bit_eq(&y.tensor))
        .map(|(x, _)| x.name.clone())
        .collect()
}
