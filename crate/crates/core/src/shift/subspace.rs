use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Activation;
use crate::seed;
use crate::theory::{RegressionData, TwoLayerNet};

use super::Dataset;

/// Relative singular-value cutoff for rank checks.
const RANK_TOL: f64 = 1e-10;

/// Linear teacher `y = v*ᵀ B* x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub v: DVector<f64>,
    pub b: DMatrix<f64>,
}

impl Teacher {
    /// Effective weight vector `w* = B*ᵀ v*`.
    pub fn weights(&self) -> DVector<f64> {
        self.b.transpose() * &self.v
    }
}

/// Gaussian data supported on the column space of `basis`: `x = S z`,
/// `z ~ N(0, I)`, labelled by a linear teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceGaussianSpec {
    basis: DMatrix<f64>,
    teacher: Teacher,
}

impl SubspaceGaussianSpec {
    pub fn new(basis: DMatrix<f64>, teacher: Teacher) -> Result<Self> {
        if basis.nrows() != teacher.b.ncols() || teacher.v.len() != teacher.b.nrows() {
            return Err(Error::ShapeMismatch {
                op: "subspace spec",
                lhs: vec![basis.nrows(), basis.ncols()],
                rhs: vec![teacher.b.nrows(), teacher.b.ncols()],
            });
        }
        if basis.ncols() == 0 || basis.ncols() > basis.nrows() {
            return Err(Error::invalid(format!(
                "basis must have between 1 and {} columns, got {}",
                basis.nrows(),
                basis.ncols()
            )));
        }
        let rank = rank(&basis);
        if rank != basis.ncols() {
            return Err(Error::invalid(format!(
                "basis columns are not linearly independent (rank {rank} < {})",
                basis.ncols()
            )));
        }
        Ok(Self { basis, teacher })
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    /// Fails unless `w*` has a nonzero inner product with every basis column,
    /// so no nonzero source example is mapped to label 0 along a basis
    /// direction.
    pub fn check_non_degenerate(&self) -> Result<()> {
        let w = self.teacher.weights();
        for (j, col) in self.basis.column_iter().enumerate() {
            let dot = w.dot(&col);
            if dot.abs() <= 1e-12 * col.norm().max(1.0) {
                return Err(Error::invalid(format!(
                    "teacher is degenerate on basis column {j} (<w*, s_j> = {dot:e})"
                )));
            }
        }
        Ok(())
    }

    /// Orthogonal projector onto the basis column space.
    pub fn projector(&self) -> DMatrix<f64> {
        projector(&self.basis)
    }

    /// `‖(I − Π) x‖`.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        (x - self.projector() * x).norm()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> RegressionData {
        let m = self.basis.ncols();
        let z = DMatrix::<f64>::from_fn(n, m, |_, _| StandardNormal.sample(rng));
        let x = z * self.basis.transpose();
        let y = &x * self.teacher.weights();
        RegressionData { x, y }
    }
}

/// Samples `n ≥ 1` labelled points from the spec as a [`Dataset`].
pub fn sample_source(spec: &SubspaceGaussianSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("sample_source needs n >= 1"));
    }
    let mut ds = spec.sample(n, &mut seed::rng(seed)).to_dataset()?;
    ds.provenance.seed = seed;
    Ok(ds)
}

/// Draws each point from `src` or `orth` with probability ½. Also returns,
/// per row, whether it came from `orth`.
pub fn sample_orth_mixture<R: Rng + ?Sized>(
    src: &SubspaceGaussianSpec,
    orth: &SubspaceGaussianSpec,
    n: usize,
    rng: &mut R,
) -> Result<(RegressionData, Vec<bool>)> {
    if src.ambient_dim() != orth.ambient_dim() {
        return Err(Error::invalid("mixture components live in different dimensions"));
    }
    let from_orth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let n_orth = from_orth.iter().filter(|&&o| o).count();
    let a = src.sample(n - n_orth, rng);
    let b = orth.sample(n_orth, rng);
    let d = src.ambient_dim();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let (mut ia, mut ib) = (0, 0);
    for (i, &o) in from_orth.iter().enumerate() {
        let (src_data, row) = if o {
            ib += 1;
            (&b, ib - 1)
        } else {
            ia += 1;
            (&a, ia - 1)
        };
        x.set_row(i, &src_data.x.row(row));
        y[i] = src_data.y[row];
    }
    Ok((RegressionData { x, y }, from_orth))
}

/// How the two orthogonal subspaces are laid out in the ambient space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisLayout {
    /// Disjoint coordinate blocks: source first, then orthogonal.
    #[default]
    Coordinate,
    /// Coordinate blocks rotated by a random orthogonal matrix.
    Rotated,
}

/// Bases `(S_src, S_orth)` with `S_orthᵀ S_src = 0`.
pub fn orthogonal_bases<R: Rng + ?Sized>(
    d: usize,
    d_src: usize,
    d_orth: usize,
    layout: BasisLayout,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if d_src == 0 || d_orth == 0 {
        return Err(Error::invalid("subspace dimensions must be positive"));
    }
    if d_src + d_orth > d {
        return Err(Error::invalid(format!(
            "cannot fit orthogonal subspaces of dimension {d_src} and {d_orth} in R^{d}"
        )));
    }
    let q = match layout {
        BasisLayout::Coordinate => DMatrix::identity(d, d),
        BasisLayout::Rotated => {
            let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
            g.qr().q()
        }
    };
    let src = q.columns(0, d_src).into_owned();
    let orth = q.columns(d_src, d_orth).into_owned();
    Ok((src, orth))
}

/// Parameters of a two-subspace fine-tuning instance where tuning only the
/// first layer reaches zero target loss and tuning everything cannot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Config {
    pub d: usize,
    pub d_src: usize,
    pub d_orth: usize,
    pub n: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_heldout")]
    pub heldout_n: usize,
    #[serde(default)]
    pub layout: BasisLayout,
}

fn default_delta() -> f64 {
    0.1
}

fn default_heldout() -> usize {
    10_000
}

impl Theorem1Config {
    pub fn new(d: usize, d_src: usize, d_orth: usize, n: usize) -> Self {
        Self {
            d,
            d_src,
            d_orth,
            n,
            delta: default_delta(),
            heldout_n: default_heldout(),
            layout: BasisLayout::Coordinate,
        }
    }

    /// Smallest sample size is strictly above this bound.
    pub fn min_samples(&self) -> usize {
        (10.0 * self.d_orth as f64 * (2.0 / self.delta).ln()).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.d_src + self.d_orth > self.d || self.d_src == 0 || self.d_orth == 0 {
            return Err(Error::invalid(format!(
                "need 1 <= d_src, 1 <= d_orth and d_src + d_orth <= d, got ({}, {}, {})",
                self.d_src, self.d_orth, self.d
            )));
        }
        if self.n <= self.min_samples() {
            return Err(Error::invalid(format!(
                "n = {} must exceed ceil(10 d_orth ln(2/delta)) = {}",
                self.n,
                self.min_samples()
            )));
        }
        if self.d_src <= self.n {
            return Err(Error::invalid(format!(
                "d_src = {} must exceed n = {}",
                self.d_src, self.n
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Theorem1Instance {
    pub config: Theorem1Config,
    pub source: SubspaceGaussianSpec,
    pub orth: SubspaceGaussianSpec,
    /// Fine-tuning set drawn from the ½ mixture.
    pub target: RegressionData,
    pub target_from_orth: Vec<bool>,
    /// Large fresh sample from the same mixture for population-loss estimates.
    pub heldout: RegressionData,
}

pub fn make_theorem1_instance(d: usize, d_src: usize, d_orth: usize, n: usize, seed: u64) -> Result<Theorem1Instance> {
    make_theorem1_instance_with(&Theorem1Config::new(d, d_src, d_orth, n), seed)
}

pub fn make_theorem1_instance_with(config: &Theorem1Config, seed: u64) -> Result<Theorem1Instance> {
    config.validate()?;
    let d = config.d;
    let mut rng = seed::rng(seed::derive(seed, &["theorem1", "structure"]));
    let (s_src, s_orth) = orthogonal_bases(d, config.d_src, config.d_orth, config.layout, &mut rng)?;
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let source = loop {
        let teacher = Teacher {
            v: DVector::from_element(1, 1.0),
            b: DMatrix::from_fn(1, d, |_, _| normal.sample(&mut rng)),
        };
        let spec = SubspaceGaussianSpec::new(s_src.clone(), teacher)?;
        if spec.check_non_degenerate().is_ok() {
            break spec;
        }
    };
    let orth = SubspaceGaussianSpec::new(s_orth, source.teacher().clone())?;
    let mut train_rng = seed::rng(seed::derive(seed, &["theorem1", "target"]));
    let (target, target_from_orth) = sample_orth_mixture(&source, &orth, config.n, &mut train_rng)?;
    let mut heldout_rng = seed::rng(seed::derive(seed, &["theorem1", "heldout"]));
    let (heldout, _) = sample_orth_mixture(&source, &orth, config.heldout_n, &mut heldout_rng)?;
    Ok(Theorem1Instance {
        config: config.clone(),
        source,
        orth,
        target,
        target_from_orth,
        heldout,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    /// Target inputs are negated source inputs.
    InputNegation,
    /// Target labels are negated source labels.
    LabelNegation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialDims {
    pub d: usize,
    pub k: usize,
    pub n: usize,
}

/// A ReLU net with zero source loss whose target shift cannot be fixed by
/// tuning the "wrong" layer.
#[derive(Clone, Debug)]
pub struct AdversarialInstance {
    pub kind: AdversarialKind,
    pub net: TwoLayerNet,
    pub source: RegressionData,
    pub target: RegressionData,
}

/// Source inputs are uniform on `[0.5, 1.5]^d` and `B_src` has entries
/// `|N(0, 1)|`, so `B_src x_src > 0` on the whole support. For label negation
/// `v_src` is positive too.
pub fn make_adversarial_relu_instance(kind: AdversarialKind, dims: AdversarialDims, seed: u64) -> Result<AdversarialInstance> {
    let AdversarialDims { d, k, n } = dims;
    if d == 0 || k == 0 || d > 16 || k > 16 {
        return Err(Error::invalid(format!("adversarial instance needs 1 <= d, k <= 16, got d={d}, k={k}")));
    }
    let mut rng = seed::rng(seed::derive(seed, &["adversarial"]));
    let b = DMatrix::from_fn(k, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z.abs()
    });
    let v = DVector::from_fn(k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        match kind {
            AdversarialKind::LabelNegation => z.abs(),
            AdversarialKind::InputNegation => z,
        }
    });
    let net = TwoLayerNet::new(v, b, Activation::Relu)?;
    let unif = Uniform::new(0.5, 1.5).expect("valid range");
    let x = DMatrix::from_fn(n, d, |_, _| unif.sample(&mut rng));
    let y = net.predict(&x);
    let source = RegressionData::new(x, y)?;
    let target = match kind {
        AdversarialKind::InputNegation => RegressionData::new(-&source.x, source.y.clone())?,
        AdversarialKind::LabelNegation => RegressionData::new(source.x.clone(), -&source.y)?,
    };
    Ok(AdversarialInstance {
        kind,
        net,
        source,
        target,
    })
}

pub(crate) fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    svd.singular_values.iter().filter(|&&s| s > RANK_TOL * max.max(f64::MIN_POSITIVE)).count()
}

/// `S (SᵀS)⁻¹ Sᵀ` for a full-column-rank `S`.
pub(crate) fn projector(s: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = s.transpose() * s;
    let inv = gram.try_inverse().expect("full column rank basis");
    s * inv * s.transpose()
}
