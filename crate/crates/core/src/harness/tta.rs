use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tta::{run_stream, StreamResult, TtaConfig, TtaMode};
use crate::tuning::{evaluate, TuningPlan};

use super::config::{ExperimentConfig, Scenario};
use super::world::build_world;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaSummary {
    pub seed: u64,
    pub mode: TtaMode,
    pub stream_n: usize,
    /// Accuracy of the pretrained model on the shifted stream.
    pub no_adaptation: f64,
    pub accuracy: f64,
}

/// Pretrains on the source mixture, shifts inputs by a random map and adapts
/// on a stream of `stream_n` target inputs.
pub fn run_tta(config: &ExperimentConfig, seed: u64) -> Result<(TtaSummary, StreamResult)> {
    let Scenario::TtaStream(p) = &config.scenario else {
        return Err(Error::invalid("the tta runner needs a `tta_stream` scenario"));
    };
    let mut cfg = config.clone();
    cfg.target_test_n = p.stream_n;
    let world = build_world(&cfg, seed)?;
    let mut model = world.start.clone();
    let tta = TtaConfig {
        plan: TuningPlan::new(&model, &p.selector)?,
        mode: p.mode,
        augmentations: p.augmentations,
        steps_per_input: p.steps_per_input,
        lr: p.lr,
        augmentation: p.augmentation,
        seed: seed::derive(seed, &["tta"]),
    };
    let no_adaptation = evaluate(&world.start, &world.test)?
        .accuracy
        .ok_or_else(|| Error::invalid("tta stream must be a classification task"))?;
    let result = run_stream(&mut model, &tta, &world.test)?;
    Ok((
        TtaSummary {
            seed,
            mode: p.mode,
            stream_n: p.stream_n,
            no_adaptation,
            accuracy: result.accuracy,
        },
        result,
    ))
}
