use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Activation, Model, ModelSpec};
use crate::shift::{Dataset, Targets};
use crate::tensor::Tensor;

/// Regression samples held as dense matrices: `x` is `[n, d]`, one row per
/// example. Unlike [`Dataset`] it may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl RegressionData {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "regression data",
                lhs: vec![x.nrows(), x.ncols()],
                rhs: vec![y.len()],
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression data".into()));
        }
        Ok(Self { x, y })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            x: DMatrix::zeros(0, d),
            y: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
        }
    }

    /// Mean of `y²`: the loss of the constant-zero predictor.
    pub fn mean_square_target(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.y.iter().map(|v| v * v).sum::<f64>() / self.len() as f64
        }
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let data: Vec<f64> = self.x.transpose().iter().copied().collect();
        Dataset::new(
            Tensor::matrix(self.len(), self.dim(), data)?,
            Targets::Values(self.y.iter().copied().collect()),
            Default::default(),
        )
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let y = ds
            .targets()
            .values()
            .ok_or_else(|| Error::invalid("regression data needs real-valued targets"))?;
        Self::new(
            DMatrix::from_row_slice(ds.len(), ds.dim(), ds.inputs().data()),
            DVector::from_column_slice(y),
        )
    }
}

/// `f(x) = vᵀ φ(B x)` with `v ∈ R^k`, `B ∈ R^{k×d}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerNet {
    pub v: DVector<f64>,
    pub b: DMatrix<f64>,
    pub activation: Activation,
}

fn phi(activation: Activation, z: f64) -> f64 {
    match activation {
        Activation::Relu => z.max(0.0),
        Activation::Identity => z,
    }
}

fn phi_prime(activation: Activation, z: f64) -> f64 {
    match activation {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
    }
}

impl TwoLayerNet {
    pub fn new(v: DVector<f64>, b: DMatrix<f64>, activation: Activation) -> Result<Self> {
        if v.len() != b.nrows() || v.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "two-layer net",
                lhs: vec![v.len()],
                rhs: vec![b.nrows(), b.ncols()],
            });
        }
        if v.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("two-layer net parameters".into()));
        }
        Ok(Self { v, b, activation })
    }

    /// `v_i ~ N(0, σ_v²)`, `B_ij ~ N(0, σ_B²)`.
    pub fn init<R: Rng + ?Sized>(
        k: usize,
        d: usize,
        sigma_v: f64,
        sigma_b: f64,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let nv = Normal::new(0.0, sigma_v).map_err(|e| Error::invalid(e.to_string()))?;
        let nb = Normal::new(0.0, sigma_b).map_err(|e| Error::invalid(e.to_string()))?;
        let v = DVector::from_fn(k, |_, _| nv.sample(rng));
        let b = DMatrix::from_fn(k, d, |_, _| nb.sample(rng));
        Self::new(v, b, activation)
    }

    pub fn k(&self) -> usize {
        self.v.len()
    }

    pub fn d(&self) -> usize {
        self.b.ncols()
    }

    /// `[n, k]` pre-activations `X Bᵀ`.
    pub fn pre_activations(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * self.b.transpose()
    }

    pub fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.pre_activations(x).map(|z| phi(self.activation, z))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.features(x) * &self.v
    }

    /// Batch-mean squared loss; zero on an empty set.
    pub fn loss(&self, data: &RegressionData) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let r = self.predict(&data.x) - &data.y;
        r.norm_squared() / data.len() as f64
    }

    /// Loss gradients `(∇v, ∇B)`.
    pub fn gradients(&self, data: &RegressionData) -> (DVector<f64>, DMatrix<f64>) {
        let n = data.len();
        if n == 0 {
            return (DVector::zeros(self.k()), DMatrix::zeros(self.k(), self.d()));
        }
        let z = self.pre_activations(&data.x);
        let h = z.map(|v| phi(self.activation, v));
        let r = (&h * &self.v - &data.y) * (2.0 / n as f64);
        let gv = h.transpose() * &r;
        // dL/dZ_ij = r_i v_j φ'(Z_ij)
        let mut gz = z.map(|v| phi_prime(self.activation, v));
        for (j, mut col) in gz.column_iter_mut().enumerate() {
            for (i, e) in col.iter_mut().enumerate() {
                *e *= r[i] * self.v[j];
            }
        }
        let gb = gz.transpose() * &data.x;
        (gv, gb)
    }

    /// The same function as a bias-free [`Model`] with one hidden block.
    pub fn to_model(&self) -> Result<Model> {
        let spec = ModelSpec::mlp(self.d(), vec![self.k()], 1, 1)
            .with_activation(self.activation)
            .without_bias();
        let mut rng = crate::seed::rng(0);
        let mut model = Model::new(spec, &mut rng)?;
        let b: Vec<f64> = self.b.transpose().iter().copied().collect();
        for p in model.params_mut() {
            if p.name.starts_with("last") {
                p.tensor = Tensor::matrix(1, self.k(), self.v.iter().copied().collect())?;
            } else {
                p.tensor = Tensor::matrix(self.k(), self.d(), b.clone())?;
            }
        }
        Ok(model)
    }

    /// Inverse of [`TwoLayerNet::to_model`].
    pub fn from_model(model: &Model) -> Result<Self> {
        let spec = model.spec();
        if spec.hidden.len() != 1 || spec.output_dim != 1 || spec.bias {
            return Err(Error::invalid(
                "expected a bias-free model with one hidden layer and a scalar output",
            ));
        }
        let (k, d) = (spec.hidden[0], spec.input_dim);
        let mut v = None;
        let mut b = None;
        for p in model.params() {
            if p.name.starts_with("last") {
                v = Some(DVector::from_column_slice(p.tensor.data()));
            } else {
                b = Some(DMatrix::from_row_slice(k, d, p.tensor.data()));
            }
        }
        match (v, b) {
            (Some(v), Some(b)) => Self::new(v, b, spec.activation),
            _ => Err(Error::invalid("model is missing a layer")),
        }
    }
}
