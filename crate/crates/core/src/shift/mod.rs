//! Synthetic distribution shifts and dataset generation.

mod dataset;
pub mod io;
mod mixture;
mod subspace;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockId, Model};
use crate::tensor::Tensor;
use crate::theory::RegressionData;

pub use dataset::{Dataset, Provenance, Targets};
pub use mixture::{GaussianMixture, GaussianMixtureSpec};
pub use subspace::{
    make_adversarial_relu_instance, make_theorem1_instance, make_theorem1_instance_with, orthogonal_bases,
    sample_orth_mixture, sample_source, AdversarialDims, AdversarialInstance, AdversarialKind, BasisLayout,
    SubspaceGaussianSpec, Teacher, Theorem1Config, Theorem1Instance,
};

/// Mixing weight of the orthogonal component in an orthogonal mixture.
pub const ORTH_MIX: f64 = 0.5;

/// Smallest `|det A|` accepted for an input map.
pub const MIN_ABS_DET: f64 = 1e-12;

/// How `BlockNoise` interprets `sigma`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// Standard deviation is `sigma × RMS` of each tensor.
    #[default]
    Relative,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    /// `x → A x`. Rows of `A`.
    InputMap { a: Vec<Vec<f64>> },
    /// `y → t y`.
    LabelScale { t: f64 },
    /// `y → C − 1 − y`.
    LabelFlip { classes: usize },
    /// i.i.d. Gaussian noise on every tensor of one block.
    BlockNoise {
        block: BlockId,
        sigma: f64,
        #[serde(default)]
        scale: NoiseScale,
    },
    /// Equal mixture of the source and an orthogonal-subspace distribution.
    OrthMixture { d_src: usize, d_orth: usize },
}

impl ShiftSpec {
    pub fn input_map(a: &DMatrix<f64>) -> Result<Self> {
        let spec = ShiftSpec::InputMap {
            a: a.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        spec.input_matrix()?;
        Ok(spec)
    }

    /// The validated matrix of an `InputMap`.
    pub fn input_matrix(&self) -> Result<DMatrix<f64>> {
        let ShiftSpec::InputMap { a } = self else {
            return Err(Error::invalid("not an input map"));
        };
        let d = a.len();
        if d == 0 || a.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("input map must be a non-empty square matrix"));
        }
        let m = DMatrix::from_fn(d, d, |i, j| a[i][j]);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input map".into()));
        }
        let det = m.determinant();
        if det.abs() <= MIN_ABS_DET {
            return Err(Error::Singular(format!("input map has |det| = {:e}", det.abs())));
        }
        Ok(m)
    }

    /// Applies a data-level shift. `BlockNoise` acts on models and
    /// `OrthMixture` is a sampling distribution, so both are rejected here.
    pub fn apply_to_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        match self {
            ShiftSpec::InputMap { .. } => {
                let a = self.input_matrix()?;
                if a.nrows() != ds.dim() {
                    return Err(Error::ShapeMismatch {
                        op: "input map",
                        lhs: vec![a.nrows(), a.ncols()],
                        rhs: ds.inputs().shape().to_vec(),
                    });
                }
                let (n, d) = (ds.len(), ds.dim());
                let mut out = Vec::with_capacity(n * d);
                for i in 0..n {
                    let x = ds.x(i);
                    for r in 0..d {
                        let mut acc = 0.0;
                        for (c, xc) in x.iter().enumerate() {
                            acc += a[(r, c)] * xc;
                        }
                        out.push(acc);
                    }
                }
                ds.with_parts(Tensor::matrix(n, d, out)?, ds.targets().clone(), Some(self.clone()))
            }
            ShiftSpec::LabelScale { t } => {
                let v = ds
                    .targets()
                    .values()
                    .ok_or_else(|| Error::invalid("label scaling needs real-valued targets"))?;
                let scaled = Targets::Values(v.iter().map(|y| t * y).collect());
                ds.with_parts(ds.inputs().clone(), scaled, Some(self.clone()))
            }
            ShiftSpec::LabelFlip { classes } => {
                let (labels, c) = match ds.targets() {
                    Targets::Labels { labels, classes } => (labels, *classes),
                    Targets::Values(_) => return Err(Error::invalid("label flip needs class labels")),
                };
                if c != *classes {
                    return Err(Error::invalid(format!(
                        "label flip over {classes} classes applied to a {c}-class dataset"
                    )));
                }
                let flipped = Targets::Labels {
                    labels: labels.iter().map(|&y| c - 1 - y).collect(),
                    classes: c,
                };
                ds.with_parts(ds.inputs().clone(), flipped, Some(self.clone()))
            }
            ShiftSpec::BlockNoise { .. } => Err(Error::invalid("block noise applies to a model, not a dataset")),
            ShiftSpec::OrthMixture { .. } => Err(Error::invalid(
                "orthogonal mixtures are sampled, not applied; use sample_orth_mixture",
            )),
        }
    }

    /// `InputMap` and `LabelScale` on dense regression data.
    pub fn apply_to_regression(&self, data: &RegressionData) -> Result<RegressionData> {
        match self {
            ShiftSpec::InputMap { .. } => {
                let a = self.input_matrix()?;
                if a.nrows() != data.dim() {
                    return Err(Error::ShapeMismatch {
                        op: "input map",
                        lhs: vec![a.nrows(), a.ncols()],
                        rhs: vec![data.len(), data.dim()],
                    });
                }
                RegressionData::new(&data.x * a.transpose(), data.y.clone())
            }
            ShiftSpec::LabelScale { t } => RegressionData::new(data.x.clone(), &data.y * *t),
            _ => Err(Error::invalid("only input maps and label scaling apply to regression data")),
        }
    }

    /// Perturbs the named block of `model` in place. Other shifts are rejected.
    pub fn apply_to_model<R: Rng + ?Sized>(&self, model: &mut Model, rng: &mut R) -> Result<()> {
        let ShiftSpec::BlockNoise { block, sigma, scale } = self else {
            return Err(Error::invalid("only block noise applies to a model"));
        };
        if !(*sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma must be finite and >= 0, got {sigma}")));
        }
        if !model.blocks().contains(block) {
            return Err(Error::UnknownBlock(block.to_string()));
        }
        if *sigma == 0.0 {
            return Ok(());
        }
        let stds: Vec<f64> = model
            .params()
            .iter()
            .map(|p| match scale {
                NoiseScale::Absolute => sigma * 1.0,
                NoiseScale::Relative => {
                    // An all-zero tensor (a fresh bias) borrows its layer's weight scale.
                    let rms = match p.tensor.rms() {
                        r if r > 0.0 => r,
                        _ => p
                            .name
                            .strip_suffix(".bias")
                            .and_then(|l| model.param(&format!("{l}.weight")))
                            .map_or(0.0, |w| w.tensor.rms()),
                    };
                    sigma * rms
                }
            })
            .collect();
        for (p, std) in model.params_mut().iter_mut().zip(stds) {
            if p.block != *block {
                continue;
            }
            for v in p.tensor.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += std * z;
            }
        }
        Ok(())
    }
}
