use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{RegressionData, TwoLayerNet};

/// Which parameters the flow moves: `Fl` only the first layer `B`, `Ft` both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    Fl,
    Ft,
}

/// Train loss below which a flow counts as converged.
pub const CONVERGED_LOSS: f64 = 1e-12;
/// Steps inspected by the monotonicity check.
pub const MONOTONE_WINDOW: usize = 100;
/// A flow aborts once the train loss exceeds this multiple of its start.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub step_size: f64,
    pub max_steps: usize,
    pub checkpoint_every: usize,
}

impl FlowConfig {
    pub fn new(step_size: f64, max_steps: usize, checkpoint_every: usize) -> Self {
        Self {
            step_size,
            max_steps,
            checkpoint_every,
        }
    }
}

/// Snapshots of a discretized gradient flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    pub mode: FlowMode,
    pub step_size: f64,
    pub times: Vec<usize>,
    pub v: Vec<DVector<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub train_loss: Vec<f64>,
    /// Present when a held-out set was supplied.
    pub heldout_loss: Vec<Option<f64>>,
    pub converged: bool,
}

impl FlowTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_train_loss(&self) -> f64 {
        *self.train_loss.last().expect("trajectory has the initial snapshot")
    }

    pub fn final_heldout_loss(&self) -> Option<f64> {
        self.heldout_loss.last().copied().flatten()
    }

    pub fn net_at(&self, i: usize, activation: crate::model::Activation) -> TwoLayerNet {
        TwoLayerNet {
            v: self.v[i].clone(),
            b: self.b[i].clone(),
            activation,
        }
    }

    /// `v² − bᵀb` per snapshot for a single hidden unit.
    pub fn balancedness(&self) -> Result<Vec<f64>> {
        if self.v.first().is_some_and(|v| v.len() != 1) {
            return Err(Error::invalid("balancedness is defined for k = 1"));
        }
        Ok(self.v.iter().zip(&self.b).map(|(v, b)| v[0] * v[0] - b.norm_squared()).collect())
    }

    /// Max over probes of `‖B_t x − B_0 x‖` per snapshot. No orthogonality
    /// check; see [`track_projection_preservation`].
    pub fn projection_residuals(&self, probes: &[DVector<f64>]) -> Vec<f64> {
        let b0 = &self.b[0];
        let base: Vec<DVector<f64>> = probes.iter().map(|p| b0 * p).collect();
        self.b
            .iter()
            .map(|b| {
                probes
                    .iter()
                    .zip(&base)
                    .map(|(p, p0)| (b * p - p0).norm())
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Rows `(step, train_loss, heldout_loss, balancedness, max_projection_residual)`;
    /// unavailable quantities are left empty.
    pub fn write_csv<W: Write>(&self, probes: &[DVector<f64>], out: W) -> Result<()> {
        let bal = self.balancedness().ok();
        let res = (!probes.is_empty()).then(|| self.projection_residuals(probes));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "train_loss", "heldout_loss", "balancedness", "max_projection_residual"])?;
        for i in 0..self.len() {
            w.write_record([
                self.times[i].to_string(),
                self.train_loss[i].to_string(),
                self.heldout_loss[i].map(|v| v.to_string()).unwrap_or_default(),
                bal.as_ref().map(|b| b[i].to_string()).unwrap_or_default(),
                res.as_ref().map(|r| r[i].to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<trajectory>", e))?;
        Ok(())
    }
}

fn descend(net: &mut TwoLayerNet, mode: FlowMode, data: &RegressionData, eta: f64) {
    let (gv, gb) = net.gradients(data);
    net.b -= gb * eta;
    if mode == FlowMode::Ft {
        net.v -= gv * eta;
    }
}

/// True when `MONOTONE_WINDOW` steps of size `eta` never increase the loss.
pub fn is_monotone(net: &TwoLayerNet, mode: FlowMode, data: &RegressionData, eta: f64) -> bool {
    let mut probe = net.clone();
    let mut prev = probe.loss(data);
    for _ in 0..MONOTONE_WINDOW {
        descend(&mut probe, mode, data, eta);
        let l = probe.loss(data);
        if !(l <= prev) {
            return false;
        }
        prev = l;
    }
    true
}

/// Halves from `start` until the first steps are monotone.
pub fn select_step_size(net: &TwoLayerNet, mode: FlowMode, data: &RegressionData, start: f64) -> Result<f64> {
    let mut eta = start;
    while eta > 1e-12 {
        if is_monotone(net, mode, data, eta) {
            return Ok(eta);
        }
        eta /= 2.0;
    }
    Err(Error::StepTooLarge(eta))
}

/// Plain gradient descent on the batch-mean squared loss. `Fl` never writes
/// `v`. Stops at `max_steps` or once the train loss is below
/// [`CONVERGED_LOSS`]. Snapshots every `checkpoint_every` steps plus the
/// final one.
pub fn run_flow(
    net: &TwoLayerNet,
    mode: FlowMode,
    data: &RegressionData,
    heldout: Option<&RegressionData>,
    config: &FlowConfig,
) -> Result<FlowTrajectory> {
    let eta = config.step_size;
    if !(eta > 0.0 && eta.is_finite()) || config.checkpoint_every == 0 {
        return Err(Error::invalid("flow needs a positive step size and checkpoint interval"));
    }
    if data.dim() != net.d() || heldout.is_some_and(|h| h.dim() != net.d()) {
        return Err(Error::ShapeMismatch {
            op: "run_flow",
            lhs: vec![net.k(), net.d()],
            rhs: vec![data.len(), data.dim()],
        });
    }
    let mut cur = net.clone();
    let initial = cur.loss(data);
    let mut traj = FlowTrajectory {
        mode,
        step_size: eta,
        times: Vec::new(),
        v: Vec::new(),
        b: Vec::new(),
        train_loss: Vec::new(),
        heldout_loss: Vec::new(),
        converged: false,
    };
    let snap = |traj: &mut FlowTrajectory, t: usize, net: &TwoLayerNet, loss: f64| {
        traj.times.push(t);
        traj.v.push(net.v.clone());
        traj.b.push(net.b.clone());
        traj.train_loss.push(loss);
        traj.heldout_loss.push(heldout.map(|h| net.loss(h)));
    };
    snap(&mut traj, 0, &cur, initial);
    if data.is_empty() || initial < CONVERGED_LOSS {
        traj.converged = true;
        return Ok(traj);
    }

    let mut prev = initial;
    let mut loss = initial;
    let mut t = 0;
    while t < config.max_steps {
        descend(&mut cur, mode, data, eta);
        t += 1;
        loss = cur.loss(data);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
            return Err(Error::Diverged(format!(
                "train loss {loss:e} at step {t} exceeds {DIVERGENCE_FACTOR}x the initial {initial:e} (step size {eta})"
            )));
        }
        if t <= MONOTONE_WINDOW && loss > prev {
            return Err(Error::StepTooLarge(eta));
        }
        prev = loss;
        if loss < CONVERGED_LOSS {
            traj.converged = true;
            break;
        }
        if t % config.checkpoint_every == 0 {
            snap(&mut traj, t, &cur, loss);
        }
    }
    if traj.times.last() != Some(&t) {
        snap(&mut traj, t, &cur, loss);
    }
    Ok(traj)
}

/// Max drift `|(v_t² − b_tᵀb_t) − (v_0² − b_0ᵀb_0)|` over the snapshots.
pub fn track_balancedness(traj: &FlowTrajectory) -> Result<f64> {
    let bal = traj.balancedness()?;
    Ok(bal.iter().map(|b| (b - bal[0]).abs()).fold(0.0, f64::max))
}

/// Max over snapshots and probes of `‖B_t x − B_0 x‖`, for probes
/// orthogonal to every training input.
pub fn track_projection_preservation(
    traj: &FlowTrajectory,
    probes: &[DVector<f64>],
    train: &RegressionData,
) -> Result<f64> {
    for (s, p) in probes.iter().enumerate() {
        if p.len() != train.dim() {
            return Err(Error::invalid(format!("probe {s} has the wrong dimension")));
        }
        for i in 0..train.len() {
            let dot = train.x.row(i).transpose().dot(p);
            if dot.abs() >= 1e-12 {
                return Err(Error::invalid(format!(
                    "probe {s} is not orthogonal to training input {i} (dot = {dot:e})"
                )));
            }
        }
    }
    Ok(traj.projection_residuals(probes).into_iter().fold(0.0, f64::max))
}

/// `count` random unit vectors in the column space of `basis` that are
/// orthogonal to every row of `train.x`.
pub fn orthogonal_probes<R: rand::Rng + ?Sized>(
    basis: &DMatrix<f64>,
    train: &RegressionData,
    count: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    use rand_distr::{Distribution, StandardNormal};
    // Orthonormal basis of the training rows by Gram-Schmidt with
    // reorthogonalization. Rows that add no new direction are skipped.
    let mut span: Vec<DVector<f64>> = Vec::new();
    for row in train.x.row_iter() {
        let x = row.transpose();
        let scale = x.norm();
        let mut r = x;
        for _ in 0..2 {
            for c in &span {
                let dot = c.dot(&r);
                r -= c * dot;
            }
        }
        let n = r.norm();
        if n > 1e-10 * scale {
            span.push(r / n);
        }
    }
    let mut probes = Vec::with_capacity(count);
    for _ in 0..count {
        let z = DVector::<f64>::from_fn(basis.ncols(), |_, _| StandardNormal.sample(rng));
        let mut p = basis * z;
        // Two passes of Gram-Schmidt keep the residual dot products at rounding level.
        for _ in 0..2 {
            for c in &span {
                let dot = c.dot(&p);
                p -= c * dot;
            }
        }
        let norm = p.norm();
        if norm < 1e-8 {
            return Err(Error::invalid("no room for probes orthogonal to the training inputs"));
        }
        probes.push(p / norm);
    }
    Ok(probes)
}
