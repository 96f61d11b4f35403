use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BlockId, Model};
use crate::select::CriterionTrace;
use crate::seed;
use crate::tuning::{
    evaluate, fine_tune, AutoSelect, Direction, EpochRecord, FineTuneConfig, FineTuneOutcome, GradualSchedule,
    OptimizerConfig, OptimizerKind, Selector, TuningPlan,
};

use super::config::{ExperimentConfig, Strategy};
use super::world::{build_world_cached, World};

/// The outcome of one (strategy, seed) run after learning-rate selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub scenario: String,
    pub strategy: String,
    pub seed: u64,
    pub lr: Option<f64>,
    /// Tensors trainable in at least one epoch of the selected run.
    pub tuned: Vec<String>,
    pub curves: Vec<EpochRecord>,
    /// Validation metric of the selected checkpoint.
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Test metric: accuracy for classification, loss for regression.
    pub test: Option<f64>,
    pub test_loss: Option<f64>,
    /// `test` minus the full fine-tuning test metric of the same seed.
    pub relative: Option<f64>,
    pub child_runs: usize,
    pub selected_block: Option<BlockId>,
    pub trace: Option<CriterionTrace>,
    pub aborted: Option<String>,
    pub wall_clock_secs: f64,
}

pub fn run_id(config: &ExperimentConfig, strategy: &Strategy, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(config.fingerprint().as_bytes());
    h.update(b"\0");
    h.update(strategy.to_string().as_bytes());
    h.update(b"\0");
    h.update(seed.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

struct Selected {
    lr: f64,
    outcome: FineTuneOutcome,
    block: Option<BlockId>,
}

fn optimizer(config: &ExperimentConfig, lr: f64) -> OptimizerConfig {
    match config.optimizer {
        OptimizerKind::Sgd => OptimizerConfig::sgd(lr),
        OptimizerKind::Adam => OptimizerConfig::adam(lr),
    }
}

fn plan_for(strategy: &Strategy, model: &Model, epochs: usize) -> Result<TuningPlan> {
    match strategy {
        Strategy::GradualFirstToLast => Ok(TuningPlan::gradual(
            model,
            GradualSchedule::new(Direction::FirstToLast, epochs, model)?,
        )),
        Strategy::GradualLastToFirst => Ok(TuningPlan::gradual(
            model,
            GradualSchedule::new(Direction::LastToFirst, epochs, model)?,
        )),
        s => {
            let sel = s
                .selector()
                .ok_or_else(|| Error::invalid(format!("strategy {s} has no fixed selector")))?;
            TuningPlan::new(model, &sel)
        }
    }
}

/// Fine-tunes once per grid learning rate and keeps the best validation
/// metric. Ties keep the earlier rate.
fn lr_search(
    config: &ExperimentConfig,
    world: &World,
    plan: &TuningPlan,
    label: &str,
    l1sp: Option<f64>,
    auto: Option<AutoSelect>,
) -> Result<(f64, FineTuneOutcome)> {
    let mut best: Option<(f64, FineTuneOutcome)> = None;
    for (i, &lr) in config.lr_grid.iter().enumerate() {
        let mut model = world.start.clone();
        let ft = FineTuneConfig {
            max_epochs: config.epochs,
            batch_size: config.batch_size,
            seed: seed::derive(world.seed, &[label, &format!("lr{i}")]),
            l1sp,
            auto,
        };
        let out = fine_tune(&mut model, plan, &optimizer(config, lr), &world.train, &world.val, &ft)?;
        if best.as_ref().is_none_or(|(_, b)| out.best_val.beats(&b.best_val)) {
            best = Some((lr, out));
        }
    }
    best.ok_or_else(|| Error::invalid("empty learning-rate grid"))
}

/// Tunes each block alone over the learning-rate grid and returns the
/// winner by validation metric, ties going to the earlier block.
pub fn cross_val_select(config: &ExperimentConfig, world: &World) -> Result<(BlockId, f64, FineTuneOutcome, usize)> {
    let blocks = world.start.blocks().to_vec();
    let mut best: Option<(BlockId, f64, FineTuneOutcome)> = None;
    for block in &blocks {
        let plan = TuningPlan::new(&world.start, &Selector::Blocks(vec![*block]))?;
        let label = format!("cross_val/{block}");
        let (lr, out) = lr_search(config, world, &plan, &label, None, None)?;
        if best.as_ref().is_none_or(|(_, _, b)| out.best_val.beats(&b.best_val)) {
            best = Some((*block, lr, out));
        }
    }
    let (block, lr, out) = best.ok_or_else(|| Error::invalid("model has no blocks"))?;
    Ok((block, lr, out, blocks.len() * config.lr_grid.len()))
}

fn run_strategy(config: &ExperimentConfig, world: &World, strategy: &Strategy) -> Result<(Selected, usize)> {
    let label = strategy.to_string();
    let (l1sp, auto) = match strategy {
        Strategy::L1sp(l) => (Some(*l), None),
        Strategy::AutoRgn => (None, Some(AutoSelect::Rgn)),
        Strategy::AutoSnr(tau) => (None, Some(AutoSelect::Snr { tau: *tau })),
        _ => (None, None),
    };
    if let Strategy::CrossVal = strategy {
        let (block, lr, outcome, children) = cross_val_select(config, world)?;
        return Ok((
            Selected {
                lr,
                outcome,
                block: Some(block),
            },
            children,
        ));
    }
    let plan = plan_for(strategy, &world.start, config.epochs)?;
    let (lr, outcome) = lr_search(config, world, &plan, &label, l1sp, auto)?;
    Ok((Selected { lr, outcome, block: None }, config.lr_grid.len()))
}

fn report(config: &ExperimentConfig, world: Result<&World>, strategy: &Strategy, seed: u64) -> RunReport {
    let start = Instant::now();
    let mut r = RunReport {
        run_id: run_id(config, strategy, seed),
        scenario: config.scenario.name().to_string(),
        strategy: strategy.to_string(),
        seed,
        lr: None,
        tuned: Vec::new(),
        curves: Vec::new(),
        best_val: None,
        best_epoch: None,
        test: None,
        test_loss: None,
        relative: None,
        child_runs: 0,
        selected_block: None,
        trace: None,
        aborted: None,
        wall_clock_secs: 0.0,
    };
    let result = world.and_then(|w| {
        let (sel, children) = run_strategy(config, w, strategy)?;
        let best = Model::from_checkpoint(&sel.outcome.best)?;
        let test = evaluate(&best, &w.test)?;
        Ok((sel, children, test))
    });
    match result {
        Ok((sel, children, test)) => {
            r.lr = Some(sel.lr);
            r.best_val = Some(sel.outcome.best_val.metric());
            r.best_epoch = Some(sel.outcome.best_epoch);
            r.tuned = sel.outcome.tuned;
            r.curves = sel.outcome.curves;
            r.trace = sel.outcome.trace;
            r.test = Some(test.metric());
            r.test_loss = Some(test.loss);
            r.child_runs = children;
            r.selected_block = sel.block;
        }
        Err(e) => r.aborted = Some(e.to_string()),
    }
    r.wall_clock_secs = start.elapsed().as_secs_f64();
    r
}

/// Runs every (strategy, seed) pair of `config` on `workers` threads.
///
/// Worlds are built once per seed and shared across strategies. A run that
/// fails is reported as aborted instead of failing the sweep. Reports come
/// back sorted by run id with `relative` filled in against `all`.
pub fn run_sweep(config: &ExperimentConfig, workers: usize) -> Result<Vec<RunReport>> {
    run_sweep_cached(config, workers, None)
}

/// [`run_sweep`] with pretrained source models cached in `cache`.
pub fn run_sweep_cached(config: &ExperimentConfig, workers: usize, cache: Option<&Path>) -> Result<Vec<RunReport>> {
    config.validate()?;
    if config.scenario.is_theory() && !matches!(config.scenario, super::Scenario::Theorem1(_)) {
        return Err(Error::invalid(format!(
            "scenario `{}` is handled by the theory runner",
            config.scenario.name()
        )));
    }
    if matches!(config.scenario, super::Scenario::TtaStream(_)) {
        return Err(Error::invalid("scenario `tta_stream` is handled by the tta runner"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut reports = pool.install(|| {
        let worlds: Vec<(u64, std::result::Result<World, String>)> = config
            .seeds
            .par_iter()
            .map(|&s| (s, build_world_cached(config, s, cache).map_err(|e| e.to_string())))
            .collect();
        let jobs: Vec<(&Strategy, usize)> = config
            .strategies
            .iter()
            .flat_map(|st| (0..worlds.len()).map(move |i| (st, i)))
            .collect();
        jobs.par_iter()
            .map(|&(st, i)| {
                let (s, w) = &worlds[i];
                let w = w.as_ref().map_err(|e| Error::invalid(format!("building seed {s}: {e}")));
                report(config, w, st, *s)
            })
            .collect::<Vec<_>>()
    });
    fill_relative(&mut reports);
    reports.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(reports)
}

/// Sets `relative = test - test(all)` per seed wherever both exist.
pub fn fill_relative(reports: &mut [RunReport]) {
    let full: BTreeMap<(String, u64), f64> = reports
        .iter()
        .filter(|r| r.strategy == Strategy::All.to_string())
        .filter_map(|r| r.test.map(|t| ((r.scenario.clone(), r.seed), t)))
        .collect();
    for r in reports.iter_mut() {
        r.relative = match (r.test, full.get(&(r.scenario.clone(), r.seed))) {
            (Some(t), Some(f)) => Some(t - f),
            _ => None,
        };
    }
}
