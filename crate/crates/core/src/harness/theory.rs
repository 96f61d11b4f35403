//! Runners for the two-layer network scenarios.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Activation;
use crate::seed;
use crate::shift::{make_adversarial_relu_instance, make_theorem1_instance_with, AdversarialDims, AdversarialKind, Theorem1Config};
use crate::theory::{
    best_last_layer_loss, closed_form_input_adapt, closed_form_label_adapt, orthogonal_probes, pretrain_theorem1,
    run_flow, select_step_size, track_balancedness, track_projection_preservation, FlowConfig, FlowMode,
    FlowTrajectory, RegressionData, TwoLayerNet,
};

/// Initial step size tried before halving.
pub const START_STEP: f64 = 1e-2;
pub const FLOW_MAX_STEPS: usize = 1_000_000;
pub const FLOW_CHECKPOINT_EVERY: usize = 1000;
pub const PROBES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Summary {
    pub seed: u64,
    pub v0: f64,
    pub orth_samples: usize,
    pub fl_step: f64,
    pub ft_step: f64,
    pub fl_steps: usize,
    pub ft_steps: usize,
    pub fl_final_heldout: f64,
    pub ft_min_heldout: f64,
    pub ft_final_heldout: f64,
    /// Every ft snapshot has held-out loss above fl's final held-out loss.
    pub ft_above_fl: bool,
    pub fl_projection_drift: f64,
    pub ft_projection_drift: f64,
}

pub struct Theorem1Run {
    pub summary: Theorem1Summary,
    pub fl: FlowTrajectory,
    pub ft: FlowTrajectory,
    pub probes: Vec<DVector<f64>>,
}

/// Pretrains on the source subspace and runs both flows on the orthogonal
/// mixture target.
pub fn run_theorem1(config: &Theorem1Config, seed: u64, max_steps: usize) -> Result<Theorem1Run> {
    let inst = make_theorem1_instance_with(config, seed)?;
    let sigma_b = 1.0 / (config.d as f64).sqrt();
    let net = pretrain_theorem1(&inst, 1.0, sigma_b, &mut seed::rng(seed::derive(seed, &["theorem1", "init"])))?;
    let fl_step = select_step_size(&net, FlowMode::Fl, &inst.target, START_STEP)?;
    let ft_step = select_step_size(&net, FlowMode::Ft, &inst.target, START_STEP)?;
    let fl = run_flow(&net, FlowMode::Fl, &inst.target, Some(&inst.heldout), &FlowConfig::new(fl_step, max_steps, FLOW_CHECKPOINT_EVERY))?;
    let ft = run_flow(&net, FlowMode::Ft, &inst.target, Some(&inst.heldout), &FlowConfig::new(ft_step, max_steps, FLOW_CHECKPOINT_EVERY))?;
    // Probes live in the whole ambient space minus the span of the training inputs.
    let probes = orthogonal_probes(
        &DMatrix::identity(config.d, config.d),
        &inst.target,
        PROBES,
        &mut seed::rng(seed::derive(seed, &["theorem1", "probes"])),
    )?;
    let fl_final = fl.final_heldout_loss().unwrap_or(f64::NAN);
    let held: Vec<f64> = ft.heldout_loss.iter().map(|h| h.unwrap_or(f64::NAN)).collect();
    let summary = Theorem1Summary {
        seed,
        v0: net.v[0],
        orth_samples: inst.target_from_orth.iter().filter(|&&o| o).count(),
        fl_step,
        ft_step,
        fl_steps: *fl.times.last().unwrap_or(&0),
        ft_steps: *ft.times.last().unwrap_or(&0),
        fl_final_heldout: fl_final,
        ft_min_heldout: held.iter().copied().fold(f64::INFINITY, f64::min),
        ft_final_heldout: *held.last().unwrap_or(&f64::NAN),
        ft_above_fl: held.iter().all(|&h| h > fl_final),
        fl_projection_drift: track_projection_preservation(&fl, &probes, &inst.target)?,
        ft_projection_drift: track_projection_preservation(&ft, &probes, &inst.target)?,
    };
    Ok(Theorem1Run { summary, fl, ft, probes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancednessSummary {
    pub initial: f64,
    pub drift: f64,
    pub drift_half_step: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl BalancednessSummary {
    pub fn relative_drift(&self) -> f64 {
        self.drift / self.initial.abs()
    }

    pub fn halving_ratio(&self) -> f64 {
        self.drift / self.drift_half_step
    }
}

/// Full-FT descent at `eta` and `eta / 2`, both for `steps` steps.
pub fn run_balancedness(config: &Theorem1Config, seed: u64, eta: f64, steps: usize) -> Result<BalancednessSummary> {
    let inst = make_theorem1_instance_with(config, seed)?;
    let sigma_b = 1.0 / (config.d as f64).sqrt();
    let net = pretrain_theorem1(&inst, 1.0, sigma_b, &mut seed::rng(seed::derive(seed, &["theorem1", "init"])))?;
    let run = |eta: f64| -> Result<FlowTrajectory> {
        run_flow(&net, FlowMode::Ft, &inst.target, None, &FlowConfig::new(eta, steps, 10))
    };
    let full = run(eta)?;
    let half = run(eta / 2.0)?;
    Ok(BalancednessSummary {
        initial: full.balancedness()?[0],
        drift: track_balancedness(&full)?,
        drift_half_step: track_balancedness(&half)?,
        steps,
        step_size: eta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Summary {
    /// Held-out target loss of `B_src A⁻¹` per random input map.
    pub adapted_losses: Vec<f64>,
    pub conditions: Vec<f64>,
    pub negation_best_last_layer: f64,
    pub negation_mean_square: f64,
}

/// Draws `A = I + G/√d` until `cond(A) < max_condition`.
pub fn random_invertible<R: rand::Rng + ?Sized>(d: usize, max_condition: f64, rng: &mut R) -> (DMatrix<f64>, f64) {
    loop {
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        let a = DMatrix::identity(d, d) + g / (d as f64).sqrt();
        let sv = a.singular_values();
        let cond = sv.max() / sv.min();
        if cond.is_finite() && cond < max_condition {
            return (a, cond);
        }
    }
}

fn gaussian_data<R: rand::Rng + ?Sized>(net: &TwoLayerNet, n: usize, rng: &mut R) -> Result<RegressionData> {
    let x = DMatrix::<f64>::from_fn(n, net.d(), |_, _| StandardNormal.sample(rng));
    let y = net.predict(&x);
    RegressionData::new(x, y)
}

pub fn run_prop1(dims: AdversarialDims, trials: usize, seed: u64) -> Result<Prop1Summary> {
    if dims.d > 16 {
        return Err(Error::invalid("prop1 uses d <= 16"));
    }
    let mut rng = seed::rng(seed::derive(seed, &["prop1"]));
    let mut adapted_losses = Vec::with_capacity(trials);
    let mut conditions = Vec::with_capacity(trials);
    for _ in 0..trials {
        let net = TwoLayerNet::init(dims.k, dims.d, 1.0, 1.0 / (dims.d as f64).sqrt(), Activation::Relu, &mut rng)?;
        let (a, cond) = random_invertible(dims.d, 100.0, &mut rng);
        let src = gaussian_data(&net, dims.n.max(1000), &mut rng)?;
        // Target inputs satisfy x_trg = A x_src with unchanged labels.
        let target = RegressionData::new(&src.x * a.transpose(), src.y.clone())?;
        let adapted = closed_form_input_adapt(&net, &a)?;
        adapted_losses.push(adapted.loss(&target));
        conditions.push(cond);
    }
    let inst = make_adversarial_relu_instance(AdversarialKind::InputNegation, dims, seed)?;
    Ok(Prop1Summary {
        adapted_losses,
        conditions,
        negation_best_last_layer: best_last_layer_loss(&inst.net, &inst.target)?,
        negation_mean_square: inst.target.mean_square_target(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2Summary {
    pub scales: Vec<f64>,
    /// Loss of `t · v_src` on labels scaled by `t`.
    pub scaled_losses: Vec<f64>,
    /// Final first-layer-only training loss per initialization.
    pub negation_first_layer: Vec<f64>,
    pub negation_mean_square: f64,
    pub descent_steps: usize,
}

pub const PROP2_INITS: usize = 5;

pub fn run_prop2(dims: AdversarialDims, scales: &[f64], descent_steps: usize, seed: u64) -> Result<Prop2Summary> {
    let mut rng = seed::rng(seed::derive(seed, &["prop2"]));
    let net = TwoLayerNet::init(dims.k, dims.d, 1.0, 1.0 / (dims.d as f64).sqrt(), Activation::Relu, &mut rng)?;
    let src = gaussian_data(&net, dims.n.max(1000), &mut rng)?;
    let scaled_losses = scales
        .iter()
        .map(|&t| {
            let target = RegressionData::new(src.x.clone(), &src.y * t)?;
            Ok(closed_form_label_adapt(&net, t)?.loss(&target))
        })
        .collect::<Result<Vec<_>>>()?;

    let inst = make_adversarial_relu_instance(AdversarialKind::LabelNegation, dims, seed)?;
    let mut negation_first_layer = Vec::with_capacity(PROP2_INITS);
    for i in 0..PROP2_INITS {
        let start = if i == 0 {
            inst.net.clone()
        } else {
            let mut r = seed::rng(seed::derive(seed, &["prop2", "init", &i.to_string()]));
            let fresh = TwoLayerNet::init(dims.k, dims.d, 1.0, 1.0, Activation::Relu, &mut r)?;
            TwoLayerNet::new(inst.net.v.clone(), fresh.b, Activation::Relu)?
        };
        let eta = select_step_size(&start, FlowMode::Fl, &inst.target, START_STEP)?;
        let traj = run_flow(&start, FlowMode::Fl, &inst.target, None, &FlowConfig::new(eta, descent_steps, descent_steps.max(1)))?;
        negation_first_layer.push(traj.final_train_loss());
    }
    Ok(Prop2Summary {
        scales: scales.to_vec(),
        scaled_losses,
        negation_first_layer,
        negation_mean_square: inst.target.mean_square_target(),
        descent_steps,
    })
}
