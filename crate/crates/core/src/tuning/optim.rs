use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};

use super::TuningPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay: 0.0,
            betas: default_betas(),
            eps: default_eps(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return Err(Error::invalid("invalid optimizer hyperparameters"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// SGD or Adam with decoupled weight decay, honoring a [`TuningPlan`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Names of tensors holding Adam moments.
    pub fn tracked(&self) -> Vec<&str> {
        self.moments.keys().map(String::as_str).collect()
    }

    /// Applies one update. `grads[i]` must be present for every trainable
    /// tensor; frozen tensors are never touched and lose their moments.
    pub fn step(&mut self, model: &mut Model, plan: &TuningPlan, grads: &[Option<Vec<f64>>]) -> Result<()> {
        plan.check(model)?;
        if grads.len() != plan.len() {
            return Err(Error::invalid("gradient list does not match the plan"));
        }
        let OptimizerConfig {
            kind,
            lr,
            weight_decay,
            betas: (b1, b2),
            eps,
        } = self.config;
        for ((entry, p), g) in plan.entries.iter().zip(model.params_mut()).zip(grads) {
            if !entry.trainable {
                self.moments.remove(&entry.name);
                continue;
            }
            let g = g.as_ref().ok_or_else(|| Error::MissingGrad(entry.name.clone()))?;
            if g.len() != p.tensor.len() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}` ({bad})", entry.name)));
            }
            let rate = lr * entry.lr_scale;
            let theta = p.tensor.data_mut();
            match kind {
                OptimizerKind::Sgd => {
                    if rate != 0.0 {
                        for (t, gi) in theta.iter_mut().zip(g) {
                            *t -= rate * (gi + weight_decay * *t);
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let mom = self.moments.entry(entry.name.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                        t: 0,
                    });
                    mom.t += 1;
                    let c1 = 1.0 - b1.powi(mom.t as i32);
                    let c2 = 1.0 - b2.powi(mom.t as i32);
                    for ((t, gi), (m, v)) in theta.iter_mut().zip(g).zip(mom.m.iter_mut().zip(mom.v.iter_mut())) {
                        *m = b1 * *m + (1.0 - b1) * gi;
                        *v = b2 * *v + (1.0 - b2) * gi * gi;
                        if rate != 0.0 {
                            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                            *t -= rate * (update + weight_decay * *t);
                        }
                    }
                }
            }
            if let Some(bad) = theta.iter().find(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("`{}` became {bad}", entry.name)));
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// L1 pull toward pretrained values: adds `λ·sign(θ − θ_anchor)` to the
/// gradients of trainable tensors, with `sign(0) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct L1SP {
    pub strength: f64,
    anchor: Vec<Vec<f64>>,
}

impl L1SP {
    pub fn new(strength: f64, anchor: &Checkpoint, model: &Model) -> Result<Self> {
        if !(strength >= 0.0 && strength.is_finite()) {
            return Err(Error::invalid(format!("L1-SP strength must be >= 0, got {strength}")));
        }
        if anchor.params.len() != model.params().len() {
            return Err(Error::Checkpoint("anchor does not match the model".into()));
        }
        let mut values = Vec::with_capacity(anchor.params.len());
        for ((name, t), p) in anchor.params.iter().zip(model.params()) {
            if *name != p.name || t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!("anchor tensor `{name}` does not match `{}`", p.name)));
            }
            values.push(t.data().to_vec());
        }
        Ok(Self {
            strength,
            anchor: values,
        })
    }

    pub fn add_to(&self, model: &Model, plan: &TuningPlan, grads: &mut [Option<Vec<f64>>]) {
        if self.strength == 0.0 {
            return;
        }
        for (((entry, p), g), a) in plan.entries.iter().zip(model.params()).zip(grads.iter_mut()).zip(&self.anchor) {
            let (true, Some(g)) = (entry.trainable, g.as_mut()) else { continue };
            for ((gi, t), a) in g.iter_mut().zip(p.tensor.data()).zip(a) {
                let d = t - a;
                if d > 0.0 {
                    *gi += self.strength;
                } else if d < 0.0 {
                    *gi -= self.strength;
                }
            }
        }
    }

    pub fn penalty(&self, model: &Model) -> f64 {
        self.strength
            * model
                .params()
                .iter()
                .zip(&self.anchor)
                .map(|(p, a)| p.tensor.data().iter().zip(a).map(|(t, a)| (t - a).abs()).sum::<f64>())
                .sum::<f64>()
    }
}
