use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::Activation;
use crate::shift::Theorem1Instance;

use super::{RegressionData, TwoLayerNet};

/// First-layer fix for `x_trg = A x_src`: `B ← B_src A⁻¹`.
pub fn closed_form_input_adapt(net: &TwoLayerNet, a: &DMatrix<f64>) -> Result<TwoLayerNet> {
    if a.nrows() != net.d() || a.ncols() != net.d() {
        return Err(Error::ShapeMismatch {
            op: "input adapt",
            lhs: vec![a.nrows(), a.ncols()],
            rhs: vec![net.k(), net.d()],
        });
    }
    // Solve Aᵀ Bᵀ = B_srcᵀ rather than forming A⁻¹.
    let lu = a.transpose().lu();
    let bt = lu
        .solve(&net.b.transpose())
        .ok_or_else(|| Error::Singular("input map is not invertible".into()))?;
    TwoLayerNet::new(net.v.clone(), bt.transpose(), net.activation)
}

/// Last-layer fix for `y_trg = t y_src`: `v ← t v_src`.
pub fn closed_form_label_adapt(net: &TwoLayerNet, t: f64) -> Result<TwoLayerNet> {
    TwoLayerNet::new(&net.v * t, net.b.clone(), net.activation)
}

/// Loss of the best head `v` for fixed features, by least squares.
pub fn best_last_layer_loss(net: &TwoLayerNet, data: &RegressionData) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let h = net.features(&data.x);
    let svd = h.svd(true, true);
    let v = svd
        .solve(&data.y, 1e-12)
        .map_err(|e| Error::Singular(e.to_string()))?;
    let fitted = TwoLayerNet::new(v, net.b.clone(), net.activation)?;
    Ok(fitted.loss(data))
}

/// A `k = 1` linear net equal to the teacher on the source subspace.
///
/// Starts from `v_0 ~ N(0, σ_v²)` (redrawn while `|v_0| < 0.25`) and
/// `b_0 ~ N(0, σ_B² I)`, then replaces the source-subspace component of
/// `b_0` with `Π w*/v_0`. The orthogonal component of `b_0` is kept, as
/// gradient descent on source data would leave it.
pub fn pretrain_theorem1<R: Rng + ?Sized>(
    instance: &Theorem1Instance,
    sigma_v: f64,
    sigma_b: f64,
    rng: &mut R,
) -> Result<TwoLayerNet> {
    let d = instance.config.d;
    let nv = Normal::new(0.0, sigma_v).map_err(|e| Error::invalid(e.to_string()))?;
    let nb = Normal::new(0.0, sigma_b).map_err(|e| Error::invalid(e.to_string()))?;
    let v0 = loop {
        let v: f64 = nv.sample(rng);
        if v.abs() >= 0.25 {
            break v;
        }
    };
    let b0 = DVector::from_fn(d, |_, _| nb.sample(rng));
    let pi = instance.source.projector();
    let w = instance.source.teacher().weights();
    let b = &b0 - &pi * &b0 + &pi * &w / v0;
    TwoLayerNet::new(DVector::from_element(1, v0), DMatrix::from_row_slice(1, d, b.as_slice()), Activation::Identity)
}
