//! Surgical fine-tuning: freeze plans, optimizers, regularizers and the
//! training loop.

mod optim;
mod plan;
mod train;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, L1SP};
pub use plan::{Direction, GradualSchedule, PlanEntry, Selector, TuningPlan};
pub use train::{
    changed_tensors, compute_grads, evaluate, fine_tune, loss_on, per_example_grads, step, AutoSelect, EpochRecord,
    Evaluation, FineTuneConfig, FineTuneOutcome, StepMetrics,
};
