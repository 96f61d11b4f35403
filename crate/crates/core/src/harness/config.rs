use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockId, ModelSpec};
use crate::shift::{AdversarialDims, GaussianMixtureSpec, NoiseScale, Theorem1Config};
use crate::tta::{Augmentation, TtaMode};
use crate::tuning::{OptimizerKind, Selector};

/// A fine-tuning strategy, written in configs and reports by its label
/// (`all`, `block1`, `last`, `l1sp(0.01)`, `auto_snr(0.5)`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    All,
    Block(BlockId),
    LastLayer,
    FirstKLayers(usize),
    GradualFirstToLast,
    GradualLastToFirst,
    L1sp(f64),
    AutoRgn,
    AutoSnr(f64),
    CrossVal,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::All => f.write_str("all"),
            Strategy::Block(b) => write!(f, "{b}"),
            Strategy::LastLayer => f.write_str("last_layer"),
            Strategy::FirstKLayers(k) => write!(f, "first_{k}_layers"),
            Strategy::GradualFirstToLast => f.write_str("gradual_fl"),
            Strategy::GradualLastToFirst => f.write_str("gradual_lf"),
            Strategy::L1sp(l) => write!(f, "l1sp({l})"),
            Strategy::AutoRgn => f.write_str("auto_rgn"),
            Strategy::AutoSnr(t) => write!(f, "auto_snr({t})"),
            Strategy::CrossVal => f.write_str("cross_val"),
        }
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Parses the labels produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown strategy `{s}`"));
        let arg = |prefix: &str| -> Option<&str> { s.strip_prefix(prefix)?.strip_suffix(')') };
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        Ok(match s {
            "all" => Strategy::All,
            "last_layer" => Strategy::LastLayer,
            "gradual_fl" => Strategy::GradualFirstToLast,
            "gradual_lf" => Strategy::GradualLastToFirst,
            "auto_rgn" => Strategy::AutoRgn,
            "cross_val" => Strategy::CrossVal,
            _ if s.starts_with("block") || s == "last" => Strategy::Block(s.parse().map_err(|_| bad())?),
            _ => {
                if let Some(v) = arg("l1sp(") {
                    Strategy::L1sp(num(v)?)
                } else if let Some(v) = arg("auto_snr(") {
                    Strategy::AutoSnr(num(v)?)
                } else if let Some(k) = s.strip_prefix("first_").and_then(|r| r.strip_suffix("_layers")) {
                    Strategy::FirstKLayers(k.parse().map_err(|_| bad())?)
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl Strategy {
    /// The fixed selector of strategies that do not change the plan on the fly.
    pub fn selector(&self) -> Option<Selector> {
        match self {
            Strategy::All | Strategy::L1sp(_) | Strategy::AutoRgn | Strategy::AutoSnr(_) => Some(Selector::All),
            Strategy::Block(b) => Some(Selector::Blocks(vec![*b])),
            Strategy::LastLayer => Some(Selector::LastLayer),
            Strategy::FirstKLayers(k) => Some(Selector::FirstKLayers(*k)),
            _ => None,
        }
    }
}

/// Random invertible input map `A = I + strength · G / √d` with `G` standard
/// normal, redrawn until its condition number is below `max_condition`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputMapParams {
    pub strength: f64,
    #[serde(default = "default_max_condition")]
    pub max_condition: f64,
}

fn default_max_condition() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaParams {
    pub mode: TtaMode,
    pub selector: Selector,
    pub augmentations: usize,
    pub steps_per_input: usize,
    pub lr: f64,
    pub augmentation: Augmentation,
    pub shift: InputMapParams,
    pub stream_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Scenario {
    Theorem1(Theorem1Config),
    Prop1 {
        dims: AdversarialDims,
        /// Random input maps checked against the closed-form first-layer fix.
        #[serde(default = "default_trials")]
        trials: usize,
    },
    Prop2 {
        dims: AdversarialDims,
        #[serde(default = "default_label_scales")]
        scales: Vec<f64>,
        #[serde(default = "default_descent_steps")]
        descent_steps: usize,
    },
    BlockNoise {
        block: BlockId,
        sigma: f64,
        #[serde(default)]
        scale: NoiseScale,
    },
    InputMap(InputMapParams),
    LabelScale {
        t: f64,
    },
    LabelFlip,
    TtaStream(TtaParams),
    /// No shift: fine-tune on fresh source data.
    MlpTransfer,
}

fn default_trials() -> usize {
    20
}

fn default_label_scales() -> Vec<f64> {
    vec![-3.0, -1.0, 0.0, 0.5, 2.0]
}

fn default_descent_steps() -> usize {
    100_000
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Theorem1(_) => "theorem1",
            Scenario::Prop1 { .. } => "prop1",
            Scenario::Prop2 { .. } => "prop2",
            Scenario::BlockNoise { .. } => "block_noise",
            Scenario::InputMap(_) => "input_map",
            Scenario::LabelScale { .. } => "label_scale",
            Scenario::LabelFlip => "label_flip",
            Scenario::TtaStream(_) => "tta_stream",
            Scenario::MlpTransfer => "mlp_transfer",
        }
    }

    /// Scenarios answered by the two-layer theory runner.
    pub fn is_theory(&self) -> bool {
        matches!(self, Scenario::Theorem1(_) | Scenario::Prop1 { .. } | Scenario::Prop2 { .. })
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, Scenario::LabelScale { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub blocks: usize,
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, output_dim: usize) -> ModelSpec {
        ModelSpec::mlp(input_dim, self.hidden.clone(), output_dim, self.blocks)
    }
}

/// Source training before any shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "default_data")]
    pub data: GaussianMixtureSpec,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_train_n")]
    pub target_train_n: usize,
    #[serde(default = "default_val_n")]
    pub target_val_n: usize,
    #[serde(default = "default_test_n")]
    pub target_test_n: usize,
}

fn default_data() -> GaussianMixtureSpec {
    GaussianMixtureSpec {
        dim: 32,
        classes: 10,
        separation: 4.0,
        noise_std: 1.0,
    }
}

fn default_model() -> ModelConfig {
    ModelConfig {
        hidden: vec![64, 64, 64],
        blocks: 3,
    }
}

fn default_pretrain() -> PretrainConfig {
    PretrainConfig {
        n: 4000,
        epochs: 30,
        lr: 1e-3,
        batch_size: 64,
    }
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::All]
}

fn default_lr_grid() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_epochs() -> usize {
    15
}

fn default_batch() -> usize {
    32
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_train_n() -> usize {
    500
}

fn default_val_n() -> usize {
    500
}

fn default_test_n() -> usize {
    2000
}

impl ExperimentConfig {
    /// A config for `scenario` with every other field at its default.
    pub fn for_scenario(scenario: Scenario) -> Self {
        Self {
            scenario,
            data: default_data(),
            model: default_model(),
            pretrain: default_pretrain(),
            strategies: default_strategies(),
            lr_grid: default_lr_grid(),
            seeds: default_seeds(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            target_train_n: default_train_n(),
            target_val_n: default_val_n(),
            target_test_n: default_test_n(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.seeds.is_empty() || self.strategies.is_empty() {
            return Err(Error::invalid("lr_grid, seeds and strategies must be non-empty"));
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.target_train_n == 0 || self.target_val_n == 0 || self.target_test_n == 0 {
            return Err(Error::invalid("target splits must be non-empty"));
        }
        if self.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        self.model.spec(self.data.dim, self.data.classes).validate()?;
        let blocks = self.model.blocks;
        for s in &self.strategies {
            match s {
                Strategy::Block(BlockId::Hidden(i)) if *i >= blocks => {
                    return Err(Error::UnknownBlock(BlockId::Hidden(*i).to_string()))
                }
                Strategy::AutoSnr(t) if !(0.0..=1.0).contains(t) => {
                    return Err(Error::invalid(format!("SNR threshold {t} outside [0, 1]")))
                }
                Strategy::L1sp(l) if !(*l >= 0.0) => return Err(Error::invalid("L1-SP strength must be >= 0")),
                Strategy::GradualFirstToLast | Strategy::GradualLastToFirst if self.epochs < blocks + 1 => {
                    return Err(Error::invalid("gradual unfreezing needs at least one epoch per block"))
                }
                _ => {}
            }
        }
        match &self.scenario {
            Scenario::BlockNoise { block: BlockId::Hidden(i), .. } if *i >= blocks => {
                Err(Error::UnknownBlock(BlockId::Hidden(*i).to_string()))
            }
            Scenario::BlockNoise { sigma, .. } if !(*sigma >= 0.0) => Err(Error::invalid("noise sigma must be >= 0")),
            Scenario::Theorem1(c) => c.validate(),
            _ => Ok(()),
        }
    }

    /// Canonical JSON of everything that defines a run except the strategy
    /// and seed lists.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.strategies.clear();
        c.seeds.clear();
        serde_json::to_string(&c).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_parse_from_json() {
        let s: Vec<Strategy> = serde_json::from_str(
            r#"["all", "block0", "last", "last_layer", "first_2_layers",
                "gradual_fl", "gradual_lf", "l1sp(0.01)", "auto_rgn", "auto_snr(0.5)", "cross_val"]"#,
        )
        .unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s[1], Strategy::Block(BlockId::Hidden(0)));
        let labels: Vec<String> = s.iter().map(|s| s.to_string()).collect();
        assert_eq!(labels[..3], ["all", "block0", "last"]);
        assert_eq!(labels[9], "auto_snr(0.5)");
    }

    #[test]
    fn labels_parse_back() {
        let all = [
            Strategy::All,
            Strategy::Block(BlockId::Hidden(2)),
            Strategy::Block(BlockId::Last),
            Strategy::LastLayer,
            Strategy::FirstKLayers(3),
            Strategy::GradualFirstToLast,
            Strategy::GradualLastToFirst,
            Strategy::L1sp(0.01),
            Strategy::AutoRgn,
            Strategy::AutoSnr(0.25),
            Strategy::CrossVal,
        ];
        for s in all {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("blocky".parse::<Strategy>().is_err());
        assert!("l1sp(x)".parse::<Strategy>().is_err());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(r#"{"scenario": {"name": "block_noise", "block": "block2", "sigma": 0.5}}"#).unwrap();
        assert_eq!(c.lr_grid, vec![1e-2, 1e-3, 1e-4]);
        assert_eq!(c.scenario.name(), "block_noise");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"scenario": {"name": "label_flip"}, "seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"scenario": {"name": "block_noise", "block": "block7", "sigma": 0.5}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"scenario": {"name": "nope"}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"scenario": {"name": "label_flip"}, "strategies": ["auto_snr(2)"]}"#).is_err());
    }

    #[test]
    fn fingerprint_ignores_strategy_and_seed_lists() {
        let mut a = ExperimentConfig::for_scenario(Scenario::LabelFlip);
        let mut b = a.clone();
        b.seeds = vec![9];
        b.strategies.push(Strategy::CrossVal);
        assert_eq!(a.fingerprint(), b.fingerprint());
        a.epochs += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
