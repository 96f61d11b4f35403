//! Two-layer network fine-tuning dynamics: closed-form adaptations,
//! discretized gradient flows and their conserved quantities.

mod closed_form;
mod flow;
mod net;

pub use closed_form::{
    best_last_layer_loss, closed_form_input_adapt, closed_form_label_adapt, pretrain_theorem1,
};
pub use flow::{
    is_monotone, orthogonal_probes, run_flow, select_step_size, track_balancedness, track_projection_preservation, FlowConfig,
    FlowMode, FlowTrajectory, CONVERGED_LOSS, DIVERGENCE_FACTOR, MONOTONE_WINDOW,
};
pub use net::{RegressionData, TwoLayerNet};
