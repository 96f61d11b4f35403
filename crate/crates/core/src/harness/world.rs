use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Activation, Checkpoint, CheckpointMeta, Model};
use crate::seed;
use crate::shift::{make_theorem1_instance_with, Dataset, GaussianMixture, ShiftSpec, Targets};
use crate::theory::{pretrain_theorem1, TwoLayerNet};
use crate::tuning::{fine_tune, FineTuneConfig, OptimizerConfig, TuningPlan};

use super::config::{ExperimentConfig, InputMapParams, Scenario};

/// Everything a fine-tuning run needs for one seed: the shifted starting
/// model and disjoint target splits.
#[derive(Clone, Debug)]
pub struct World {
    pub seed: u64,
    /// The pretrained source model before any parameter shift.
    pub pretrained: Model,
    /// Starting point for fine-tuning (equal to `pretrained` unless the shift
    /// perturbs parameters).
    pub start: Model,
    pub shift: Option<ShiftSpec>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// `A = I + strength · G / √d`, redrawn until `cond(A) < max_condition`.
pub fn random_input_map(d: usize, params: &InputMapParams, seed: u64) -> Result<ShiftSpec> {
    let mut rng = seed::rng(seed::derive(seed, &["input_map"]));
    for _ in 0..1000 {
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let a = DMatrix::identity(d, d) + g * (params.strength / (d as f64).sqrt());
        let sv = a.singular_values();
        let cond = sv.max() / sv.min();
        if cond.is_finite() && cond < params.max_condition {
            return ShiftSpec::input_map(&a);
        }
    }
    Err(Error::invalid(format!(
        "could not draw an input map with condition number below {}",
        params.max_condition
    )))
}

/// Trains a fresh model on `train`, keeping the best checkpoint on `val`.
pub fn pretrain(config: &ExperimentConfig, model: Model, train: &Dataset, val: &Dataset, seed: u64) -> Result<Model> {
    let mut model = model;
    let plan = TuningPlan::all(&model);
    let out = fine_tune(
        &mut model,
        &plan,
        &OptimizerConfig::adam(config.pretrain.lr),
        train,
        val,
        &FineTuneConfig {
            max_epochs: config.pretrain.epochs,
            batch_size: config.pretrain.batch_size,
            seed: seed::derive(seed, &["pretrain"]),
            l1sp: None,
            auto: None,
        },
    )?;
    Model::from_checkpoint(&out.best)
}

/// Regression labels from a fixed random ReLU teacher.
fn regression_teacher(d: usize, seed: u64) -> Result<TwoLayerNet> {
    let mut rng = seed::rng(seed::derive(seed, &["teacher"]));
    TwoLayerNet::init(16, d, 1.0, 1.0 / (d as f64).sqrt(), Activation::Relu, &mut rng)
}

fn relabel(ds: &Dataset, teacher: &TwoLayerNet) -> Result<Dataset> {
    let x = DMatrix::from_row_slice(ds.len(), ds.dim(), ds.inputs().data());
    let y = teacher.predict(&x);
    Dataset::new(ds.inputs().clone(), Targets::Values(y.iter().copied().collect()), ds.provenance.clone())
}

/// Builds the world for `seed`. Every random draw comes from its own stream
/// derived from the seed, so splits are disjoint samples.
pub fn build_world(config: &ExperimentConfig, seed: u64) -> Result<World> {
    build_world_cached(config, seed, None)
}

/// Cache key of the pretrained source model: everything that determines it.
pub fn pretrain_key(config: &ExperimentConfig, seed: u64) -> String {
    let key = serde_json::json!({
        "data": config.data,
        "model": config.model,
        "pretrain": config.pretrain,
        "regression": config.scenario.is_regression(),
        "seed": seed,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    format!("pretrained-{}.json", hex::encode(&digest[..8]))
}

/// Like [`build_world`], reusing pretrained checkpoints stored in `cache`.
pub fn build_world_cached(config: &ExperimentConfig, seed: u64, cache: Option<&Path>) -> Result<World> {
    if let Scenario::Theorem1(t1) = &config.scenario {
        return theorem1_world(config, t1, seed);
    }
    let stream = |parts: &[&str]| seed::rng(seed::derive(seed, parts));
    let mixture = GaussianMixture::new(config.data.clone(), seed::derive(seed, &["mixture"]))?;
    let teacher = match config.scenario {
        Scenario::LabelScale { .. } => Some(regression_teacher(config.data.dim, seed)?),
        _ => None,
    };
    let sample = |n: usize, parts: &[&str]| -> Result<Dataset> {
        let mut ds = mixture.sample(n, &mut stream(parts))?;
        if let Some(t) = &teacher {
            ds = relabel(&ds, t)?;
        }
        ds.provenance.seed = seed;
        Ok(ds)
    };
    let source_train = sample(config.pretrain.n, &["source", "train"])?;
    let source_val = sample(config.pretrain.n.div_ceil(4), &["source", "val"])?;
    let out_dim = if teacher.is_some() { 1 } else { config.data.classes };
    let spec = config.model.spec(config.data.dim, out_dim);
    let cached = cache.map(|dir| dir.join(pretrain_key(config, seed)));
    let pretrained = match &cached {
        Some(path) if path.exists() => Model::from_checkpoint(&Checkpoint::load(path)?)?,
        _ => {
            let init = Model::new(spec, &mut stream(&["init"]))?;
            let m = pretrain(config, init, &source_train, &source_val, seed)?;
            if let Some(path) = &cached {
                save_atomic(&m.checkpoint(CheckpointMeta { seed, ..Default::default() }), path)?;
            }
            m
        }
    };

    let mut start = pretrained.clone();
    let shift = match &config.scenario {
        Scenario::BlockNoise { block, sigma, scale } => Some(ShiftSpec::BlockNoise {
            block: *block,
            sigma: *sigma,
            scale: *scale,
        }),
        Scenario::InputMap(p) => Some(random_input_map(config.data.dim, p, seed)?),
        Scenario::TtaStream(p) => Some(random_input_map(config.data.dim, &p.shift, seed)?),
        Scenario::LabelScale { t } => Some(ShiftSpec::LabelScale { t: *t }),
        Scenario::LabelFlip => Some(ShiftSpec::LabelFlip {
            classes: config.data.classes,
        }),
        Scenario::MlpTransfer => None,
        Scenario::Theorem1(_) | Scenario::Prop1 { .. } | Scenario::Prop2 { .. } => {
            return Err(Error::invalid(format!(
                "scenario `{}` has no fine-tuning world",
                config.scenario.name()
            )))
        }
    };
    let target = |n: usize, split: &str| -> Result<Dataset> {
        let ds = sample(n, &["target", split])?;
        match &shift {
            Some(s @ ShiftSpec::BlockNoise { .. }) | Some(s @ ShiftSpec::OrthMixture { .. }) => {
                let mut ds = ds;
                ds.provenance.shifts.push(s.clone());
                Ok(ds)
            }
            Some(s) => s.apply_to_dataset(&ds),
            None => Ok(ds),
        }
    };
    if let Some(s @ ShiftSpec::BlockNoise { .. }) = &shift {
        s.apply_to_model(&mut start, &mut stream(&["shift", "noise"]))?;
    }
    Ok(World {
        seed,
        pretrained,
        start,
        train: target(config.target_train_n, "train")?,
        val: target(config.target_val_n, "val")?,
        test: target(config.target_test_n, "test")?,
        shift,
    })
}

fn save_atomic(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    ckpt.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn theorem1_world(config: &ExperimentConfig, t1: &crate::shift::Theorem1Config, seed: u64) -> Result<World> {
    let mut t1 = t1.clone();
    t1.heldout_n = t1.heldout_n.max(config.target_val_n + config.target_test_n);
    let inst = make_theorem1_instance_with(&t1, seed)?;
    let d = t1.d as f64;
    let net = pretrain_theorem1(&inst, 1.0, 1.0 / d.sqrt(), &mut seed::rng(seed::derive(seed, &["theorem1", "init"])))?;
    let model = net.to_model()?;
    let held = inst.heldout.to_dataset()?;
    let val_idx: Vec<usize> = (0..config.target_val_n).collect();
    let test_idx: Vec<usize> = (config.target_val_n..config.target_val_n + config.target_test_n).collect();
    Ok(World {
        seed,
        pretrained: model.clone(),
        start: model,
        shift: Some(ShiftSpec::OrthMixture {
            d_src: t1.d_src,
            d_orth: t1.d_orth,
        }),
        train: inst.target.to_dataset()?,
        val: held.subset(&val_idx)?,
        test: held.subset(&test_idx)?,
    })
}
