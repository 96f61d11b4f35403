//! Test-time adaptation by marginal-entropy minimization over augmented
//! copies of a single input, with freezing.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss;
use crate::model::{argmax, CheckpointMeta, Model};
use crate::seed;
use crate::shift::Dataset;
use crate::tensor::Tensor;
use crate::tuning::{Optimizer, OptimizerConfig, TuningPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    /// Reset to the pretrained weights after every input.
    Episodic,
    /// Keep adapting across the stream.
    Online,
}

/// Vector stand-ins for image augmentations: every coordinate is scaled by
/// `1 + jitter·u` with `u ~ U[-1, 1]`, then Gaussian noise is added.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub noise_std: f64,
    #[serde(default)]
    pub jitter: f64,
}

/// Halvings tried when an inner step raises the entropy.
const MAX_HALVINGS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub plan: TuningPlan,
    pub mode: TtaMode,
    /// Augmented copies per input, at least 2.
    pub augmentations: usize,
    pub steps_per_input: usize,
    pub lr: f64,
    pub augmentation: Augmentation,
    #[serde(default)]
    pub seed: u64,
}

impl TtaConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        self.plan.check(model)?;
        if self.augmentations < 2 {
            return Err(Error::invalid(format!("need at least 2 augmentations, got {}", self.augmentations)));
        }
        if !(self.augmentation.noise_std >= 0.0 && self.augmentation.jitter >= 0.0) {
            return Err(Error::invalid("augmentation strengths must be >= 0"));
        }
        Ok(())
    }

    /// Adam for episodic runs, SGD for online ones.
    pub fn optimizer(&self) -> OptimizerConfig {
        match self.mode {
            TtaMode::Episodic => OptimizerConfig::adam(self.lr),
            TtaMode::Online => OptimizerConfig::sgd(self.lr),
        }
    }

    /// The `K` augmented copies of `x`. The stream is seeded from the input's
    /// bits, so the same input always sees the same copies.
    pub fn augment(&self, x: &[f64]) -> Result<Tensor> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for v in x {
            h.update(v.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        let mut rng = seed::rng(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
        let Augmentation { noise_std, jitter } = self.augmentation;
        let mut data = Vec::with_capacity(self.augmentations * x.len());
        for _ in 0..self.augmentations {
            for &v in x {
                let u: f64 = rng.random_range(-1.0..=1.0);
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(v * (1.0 + jitter * u) + noise_std * z);
            }
        }
        Tensor::matrix(self.augmentations, x.len(), data)
    }
}

/// Outcome of adapting on one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub pred_before: usize,
    pub pred_after: usize,
    pub entropy_before: f64,
    pub entropy_after: f64,
    /// Marginal entropy before each inner step and after the last.
    pub entropies: Vec<f64>,
}

fn marginal_entropy(model: &Model, copies: &Tensor) -> Result<f64> {
    let probs = loss::probabilities(&model.forward(copies)?)?;
    let h = loss::marginal_entropy(&probs)?;
    if !h.is_finite() {
        return Err(Error::NonFinite("marginal entropy".into()));
    }
    Ok(h)
}

fn predict_one(model: &Model, x: &[f64]) -> Result<usize> {
    let out = model.forward(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
    Ok(argmax(out.row(0)))
}

/// Takes `steps_per_input` entropy-descent steps on augmented copies of `x`,
/// then predicts the clean `x` with the adapted weights. A step that raises
/// the entropy is undone and retried at half the rate.
pub fn adapt_and_predict(model: &mut Model, config: &TtaConfig, optimizer: &mut Optimizer, x: &[f64]) -> Result<Adaptation> {
    config.validate(model)?;
    let pred_before = predict_one(model, x)?;
    let copies = config.augment(x)?;
    let mut h = marginal_entropy(model, &copies)?;
    let mut entropies = vec![h];
    let mask = config.plan.trainable_mask();
    if mask.iter().any(|&t| t) {
        for _ in 0..config.steps_per_input {
            let mut tape = Tape::new();
            let bound = model.bind_masked(&mut tape, &mask)?;
            let xv = tape.constant(copies.clone())?;
            let logits = model.forward_on(&mut tape, &bound, xv)?;
            let ent = loss::marginal_entropy_on(&mut tape, logits)?;
            let mut g = tape.backward(ent)?;
            let grads: Vec<Option<Vec<f64>>> = model
                .params()
                .iter()
                .zip(&bound.vars)
                .zip(&mask)
                .map(|((p, &v), &m)| m.then(|| g.take(v).unwrap_or_else(|| vec![0.0; p.tensor.len()])))
                .collect();

            let mut plan = config.plan.clone();
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let mut trial = model.clone();
                let mut trial_opt = optimizer.clone();
                trial_opt.step(&mut trial, &plan, &grads)?;
                let h_new = marginal_entropy(&trial, &copies)?;
                if h_new <= h {
                    *model = trial;
                    *optimizer = trial_opt;
                    h = h_new;
                    accepted = true;
                    break;
                }
                plan.entries.iter_mut().for_each(|e| e.lr_scale *= 0.5);
            }
            entropies.push(h);
            if !accepted {
                break;
            }
        }
    }
    Ok(Adaptation {
        pred_before,
        pred_after: predict_one(model, x)?,
        entropy_before: entropies[0],
        entropy_after: h,
        entropies,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaLogRow {
    pub index: usize,
    pub true_label: usize,
    pub pred_before: usize,
    pub pred_after: usize,
    pub entropy_before: f64,
    pub entropy_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamResult {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// Accuracy of the unadapted predictions recorded along the way. In
    /// online mode these come from the weights as adapted so far.
    pub accuracy_before: f64,
    pub log: Vec<TtaLogRow>,
}

impl StreamResult {
    /// Rows `(index, true_label, pred_before, pred_after, entropy_before, entropy_after)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<tta log>", e))?;
        Ok(())
    }
}

/// Adapts and predicts each input of `stream` in order.
pub fn run_stream(model: &mut Model, config: &TtaConfig, stream: &Dataset) -> Result<StreamResult> {
    config.validate(model)?;
    let labels = stream
        .targets()
        .labels()
        .ok_or_else(|| Error::invalid("test-time adaptation needs a labelled classification stream"))?;
    let pristine = model.checkpoint(CheckpointMeta::default());
    let pristine_hash = model.param_hash();
    let mut optimizer = Optimizer::new(config.optimizer())?;
    let mut log = Vec::with_capacity(stream.len());
    for (i, &y) in labels.iter().enumerate() {
        let a = adapt_and_predict(model, config, &mut optimizer, stream.x(i))?;
        if config.mode == TtaMode::Episodic {
            model.restore(&pristine)?;
            optimizer = Optimizer::new(config.optimizer())?;
            let h = model.param_hash();
            if h != pristine_hash {
                return Err(Error::Checkpoint(format!(
                    "weights hash {h} after input {i} differs from pretrained {pristine_hash}"
                )));
            }
        }
        log.push(TtaLogRow {
            index: i,
            true_label: y,
            pred_before: a.pred_before,
            pred_after: a.pred_after,
            entropy_before: a.entropy_before,
            entropy_after: a.entropy_after,
        });
    }
    let n = log.len() as f64;
    Ok(StreamResult {
        predictions: log.iter().map(|r| r.pred_after).collect(),
        accuracy: log.iter().filter(|r| r.pred_after == r.true_label).count() as f64 / n,
        accuracy_before: log.iter().filter(|r| r.pred_before == r.true_label).count() as f64 / n,
        log,
    })
}
