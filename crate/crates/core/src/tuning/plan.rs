use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockId, Layer, Model};

/// Which tensors a plan makes trainable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    All,
    Blocks(Vec<BlockId>),
    LastLayer,
    /// The first `k` linear layers counted from the input.
    FirstKLayers(usize),
    Custom(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub name: String,
    pub block: BlockId,
    pub trainable: bool,
    /// Multiplier on the base learning rate, in `[0, 1]`.
    pub lr_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    FirstToLast,
    LastToFirst,
}

/// Cumulative unfreezing: one more block every `cadence` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradualSchedule {
    pub direction: Direction,
    pub total_epochs: usize,
    /// Blocks in unfreezing order.
    pub order: Vec<BlockId>,
    pub cadence: usize,
}

impl GradualSchedule {
    pub fn new(direction: Direction, total_epochs: usize, model: &Model) -> Result<Self> {
        let mut order = model.blocks().to_vec();
        if direction == Direction::LastToFirst {
            order.reverse();
        }
        if total_epochs < order.len() {
            return Err(Error::invalid(format!(
                "gradual unfreezing needs at least {} epochs, got {total_epochs}",
                order.len()
            )));
        }
        let cadence = total_epochs.div_ceil(order.len());
        Ok(Self {
            direction,
            total_epochs,
            order,
            cadence,
        })
    }

    /// Blocks trainable during `epoch` (0-based).
    pub fn active(&self, epoch: usize) -> &[BlockId] {
        let count = (epoch / self.cadence + 1).min(self.order.len());
        &self.order[..count]
    }
}

/// Per-tensor trainability and learning-rate scale, in model parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningPlan {
    pub entries: Vec<PlanEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<GradualSchedule>,
}

impl TuningPlan {
    pub fn new(model: &Model, selector: &Selector) -> Result<Self> {
        let params = model.params();
        let selected: Vec<bool> = match selector {
            Selector::All => vec![true; params.len()],
            Selector::LastLayer => params.iter().map(|p| p.block == BlockId::Last).collect(),
            Selector::Blocks(blocks) => {
                if let Some(b) = blocks.iter().find(|b| !model.blocks().contains(b)) {
                    return Err(Error::UnknownBlock(b.to_string()));
                }
                params.iter().map(|p| blocks.contains(&p.block)).collect()
            }
            Selector::FirstKLayers(k) => {
                let linear: Vec<(usize, Option<usize>)> = model
                    .layers()
                    .iter()
                    .filter_map(|l| match l {
                        Layer::Linear { weight, bias, .. } => Some((*weight, *bias)),
                        Layer::Activation(_) => None,
                    })
                    .collect();
                if *k == 0 || *k > linear.len() {
                    return Err(Error::invalid(format!(
                        "first-k selector needs 1 <= k <= {}, got {k}",
                        linear.len()
                    )));
                }
                let mut sel = vec![false; params.len()];
                for &(w, b) in &linear[..*k] {
                    sel[w] = true;
                    if let Some(b) = b {
                        sel[b] = true;
                    }
                }
                sel
            }
            Selector::Custom(names) => {
                let set: BTreeSet<&str> = names.iter().map(String::as_str).collect();
                if let Some(bad) = set.iter().find(|n| model.param_index(n).is_none()) {
                    return Err(Error::UnknownTensor(bad.to_string()));
                }
                params.iter().map(|p| set.contains(p.name.as_str())).collect()
            }
        };
        Ok(Self {
            entries: params
                .iter()
                .zip(selected)
                .map(|(p, t)| PlanEntry {
                    name: p.name.clone(),
                    block: p.block,
                    trainable: t,
                    lr_scale: 1.0,
                })
                .collect(),
            schedule: None,
        })
    }

    pub fn all(model: &Model) -> Self {
        Self::new(model, &Selector::All).expect("all-selector cannot fail")
    }

    pub fn frozen(model: &Model) -> Self {
        let mut plan = Self::all(model);
        plan.entries.iter_mut().for_each(|e| e.trainable = false);
        plan
    }

    /// A plan whose trainable set follows `schedule`, starting at epoch 0.
    pub fn gradual(model: &Model, schedule: GradualSchedule) -> Self {
        let mut plan = Self::all(model);
        plan.schedule = Some(schedule);
        plan.apply_schedule(0);
        plan
    }

    /// Rewrites trainability for `epoch` if the plan has a schedule.
    pub fn apply_schedule(&mut self, epoch: usize) {
        if let Some(s) = &self.schedule {
            let active = s.active(epoch).to_vec();
            for e in &mut self.entries {
                e.trainable = active.contains(&e.block);
                e.lr_scale = 1.0;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.trainable).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.name.clone()).collect()
    }

    pub fn entry(&self, name: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Fails unless the plan lists exactly the model's tensors in order.
    pub fn check(&self, model: &Model) -> Result<()> {
        if self.entries.len() != model.params().len() {
            return Err(Error::invalid(format!(
                "plan has {} entries for {} tensors",
                self.entries.len(),
                model.params().len()
            )));
        }
        for (e, p) in self.entries.iter().zip(model.params()) {
            if e.name != p.name {
                return Err(Error::UnknownTensor(e.name.clone()));
            }
            if !(0.0..=1.0).contains(&e.lr_scale) {
                return Err(Error::invalid(format!("lr_scale {} of `{}` outside [0, 1]", e.lr_scale, e.name)));
            }
        }
        Ok(())
    }
}
