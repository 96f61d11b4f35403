//! Automatic choice of which tensors to tune: relative gradient norm (RGN)
//! learning-rate scaling and gradient signal-to-noise (SNR) freezing.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::l2_norm;
use crate::tuning::TuningPlan;

/// `‖g‖₂ / ‖θ‖₂`.
pub fn rgn(grad: &[f64], theta: &[f64]) -> Result<f64> {
    if grad.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            op: "rgn",
            lhs: vec![grad.len()],
            rhs: vec![theta.len()],
        });
    }
    let t = l2_norm(theta);
    if t == 0.0 {
        return Err(Error::ZeroNorm("theta".into()));
    }
    Ok(l2_norm(grad) / t)
}

/// Mean over inputs `i` of `(Σ_j g_ij)² / Σ_j g_ij²`, with `0/0 = 0`.
///
/// Rows are per-input gradients of one tensor, flattened.
pub fn snr(per_input_grads: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = per_input_grads.first() else {
        return Err(Error::invalid("snr needs at least one input"));
    };
    let d = first.len();
    if d < 2 {
        return Err(Error::invalid(format!("snr needs at least two entries per gradient, got {d}")));
    }
    let mut total = 0.0;
    for row in per_input_grads {
        if row.len() != d {
            return Err(Error::ShapeMismatch {
                op: "snr",
                lhs: vec![d],
                rhs: vec![row.len()],
            });
        }
        let s: f64 = row.iter().sum();
        let sq: f64 = row.iter().map(|g| g * g).sum();
        if sq > 0.0 {
            total += s * s / sq;
        }
    }
    Ok(total / per_input_grads.len() as f64)
}

/// Min-max normalization to `[0, 1]`; an all-equal input maps to all ones.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Rgn,
    Snr,
}

/// One closed epoch of a criterion, per tensor in plan order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochCriterion {
    pub epoch: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub accumulated: Vec<f64>,
}

/// Criterion values collected over a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionTrace {
    pub criterion: Criterion,
    pub names: Vec<String>,
    /// Every raw sample, per tensor, in recording order.
    pub per_tensor_raw: BTreeMap<String, Vec<f64>>,
    pub epochs: Vec<EpochCriterion>,
    #[serde(skip)]
    pending: Vec<Vec<f64>>,
}

impl CriterionTrace {
    pub fn new(criterion: Criterion, names: Vec<String>) -> Self {
        Self {
            criterion,
            per_tensor_raw: names.iter().map(|n| (n.clone(), Vec::new())).collect(),
            pending: vec![Vec::new(); names.len()],
            names,
            epochs: Vec::new(),
        }
    }

    /// Records one raw value per tensor (one batch).
    pub fn record(&mut self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.names.len() {
            return Err(Error::invalid(format!("expected {} criterion values, got {}", self.names.len(), raw.len())));
        }
        for ((name, pend), &v) in self.names.iter().zip(&mut self.pending).zip(raw) {
            pend.push(v);
            self.per_tensor_raw.get_mut(name).expect("registered").push(v);
        }
        Ok(())
    }

    pub fn has_pending(&self) -> bool {
        self.pending.iter().any(|p| !p.is_empty())
    }

    /// Averages the pending samples, normalizes across tensors, adds to the
    /// running weights and returns the normalized values.
    pub fn close_epoch(&mut self, epoch: usize) -> Result<Vec<f64>> {
        if self.pending.iter().any(Vec::is_empty) {
            return Err(Error::invalid("criterion trace has no samples for this epoch"));
        }
        let raw: Vec<f64> = self
            .pending
            .iter_mut()
            .map(|p| {
                let m = p.iter().sum::<f64>() / p.len() as f64;
                p.clear();
                m
            })
            .collect();
        let normalized = normalize(&raw);
        let accumulated = match self.epochs.last() {
            Some(prev) => prev.accumulated.iter().zip(&normalized).map(|(a, n)| a + n).collect(),
            None => normalized.clone(),
        };
        self.epochs.push(EpochCriterion {
            epoch,
            raw,
            normalized: normalized.clone(),
            accumulated,
        });
        Ok(normalized)
    }

    pub fn per_epoch_normalized(&self) -> BTreeMap<String, f64> {
        self.latest(|e| &e.normalized)
    }

    pub fn accumulated_weight(&self) -> BTreeMap<String, f64> {
        self.latest(|e| &e.accumulated)
    }

    fn latest(&self, f: impl Fn(&EpochCriterion) -> &Vec<f64>) -> BTreeMap<String, f64> {
        match self.epochs.last() {
            Some(e) => self.names.iter().cloned().zip(f(e).iter().copied()).collect(),
            None => BTreeMap::new(),
        }
    }

    /// Rows `(epoch, tensor_name, raw_value, normalized_value, accumulated_weight)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "tensor_name", "raw_value", "normalized_value", "accumulated_weight"])?;
        for e in &self.epochs {
            for (i, name) in self.names.iter().enumerate() {
                w.write_record([
                    e.epoch.to_string(),
                    name.clone(),
                    e.raw[i].to_string(),
                    e.normalized[i].to_string(),
                    e.accumulated[i].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<criterion trace>", e))?;
        Ok(())
    }
}

/// Sets every tensor's learning-rate scale to its normalized mean RGN over
/// the pending samples. Nothing is frozen.
pub fn auto_rgn_epoch_update(trace: &mut CriterionTrace, plan: &TuningPlan, epoch: usize) -> Result<TuningPlan> {
    if !trace.has_pending() {
        return Err(Error::invalid("empty RGN trace"));
    }
    let scales = trace.close_epoch(epoch)?;
    let mut next = plan.clone();
    for (e, s) in next.entries.iter_mut().zip(scales) {
        e.trainable = true;
        e.lr_scale = s;
    }
    Ok(next)
}

/// Freezes tensors whose normalized SNR is below `tau`; the rest train at
/// full rate.
pub fn auto_snr_freeze(normalized: &[f64], plan: &TuningPlan, tau: f64) -> Result<TuningPlan> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("SNR threshold must lie in [0, 1], got {tau}")));
    }
    if normalized.len() != plan.len() {
        return Err(Error::invalid("SNR values do not match the plan"));
    }
    let mut next = plan.clone();
    for (e, &s) in next.entries.iter_mut().zip(normalized) {
        e.trainable = s >= tau;
        e.lr_scale = 1.0;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelSpec};
    use crate::seed;
    use proptest::prelude::*;

    #[test]
    fn rgn_examples() {
        let th = [3.0, 4.0];
        assert_eq!(rgn(&th, &th).unwrap(), 1.0);
        assert_eq!(rgn(&[0.0, 0.0], &th).unwrap(), 0.0);
        assert!((rgn(&[0.3, 0.4], &th).unwrap() - 0.1).abs() < 1e-16);
        assert!(matches!(rgn(&[1.0, 1.0], &[0.0, 0.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn snr_examples() {
        for d in 2..8 {
            let rows = vec![vec![1.0; d]; 3];
            assert_eq!(snr(&rows).unwrap(), d as f64);
        }
        assert_eq!(snr(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap(), 0.0);
        assert_eq!(snr(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 1.0);
        assert_eq!(snr(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap(), 1.0);
        assert!(snr(&[vec![1.0]]).is_err());
    }

    fn plan3() -> TuningPlan {
        let m = Model::new(ModelSpec::mlp(2, vec![], 2, 0), &mut seed::rng(0)).unwrap();
        let mut p = TuningPlan::all(&m);
        let mut extra = p.entries[0].clone();
        extra.name = "x".into();
        p.entries.push(extra);
        p
    }

    #[test]
    fn rgn_update_examples() {
        let plan = plan3();
        let names: Vec<String> = plan.entries.iter().map(|e| e.name.clone()).collect();
        let mut trace = CriterionTrace::new(Criterion::Rgn, names.clone());
        trace.record(&[2.0, 1.0, 1.0]).unwrap();
        let next = auto_rgn_epoch_update(&mut trace, &plan, 0).unwrap();
        let scales: Vec<f64> = next.entries.iter().map(|e| e.lr_scale).collect();
        assert_eq!(scales, vec![1.0, 0.0, 0.0]);
        assert!(next.entries.iter().all(|e| e.trainable));

        trace.record(&[0.5, 0.5, 0.5]).unwrap();
        let next = auto_rgn_epoch_update(&mut trace, &plan, 1).unwrap();
        assert!(next.entries.iter().all(|e| e.lr_scale == 1.0));
        assert!(auto_rgn_epoch_update(&mut trace, &plan, 2).is_err());

        assert_eq!(trace.accumulated_weight()[&names[0]], 2.0);
        assert_eq!(trace.accumulated_weight()[&names[1]], 1.0);
    }

    #[test]
    fn epoch_statistic_is_the_batch_mean() {
        let mut trace = CriterionTrace::new(Criterion::Rgn, vec!["a".into(), "b".into()]);
        trace.record(&[1.0, 4.0]).unwrap();
        trace.record(&[3.0, 0.0]).unwrap();
        trace.close_epoch(0).unwrap();
        assert_eq!(trace.epochs[0].raw, vec![2.0, 2.0]);
        assert_eq!(trace.per_tensor_raw["a"], vec![1.0, 3.0]);
    }

    #[test]
    fn snr_freeze_examples() {
        let plan = plan3();
        let t0 = auto_snr_freeze(&[0.9, 0.2, 0.0], &plan, 0.0).unwrap();
        assert!(t0.entries.iter().all(|e| e.trainable));
        let t1 = auto_snr_freeze(&[1.0, 0.2, 0.0], &plan, 1.0).unwrap();
        assert_eq!(t1.trainable_mask(), vec![true, false, false]);
        let half = auto_snr_freeze(&[0.9, 0.2, 0.0], &plan, 0.5).unwrap();
        assert_eq!(half.trainable_mask(), vec![true, false, false]);
        assert!(auto_snr_freeze(&[0.9, 0.2, 0.0], &plan, 1.5).is_err());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let mut trace = CriterionTrace::new(Criterion::Rgn, vec!["a".into(), "b".into()]);
        trace.record(&[1.0, 2.0]).unwrap();
        trace.close_epoch(0).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,tensor_name,raw_value,normalized_value,accumulated_weight\n0,a,1,0,0\n0,b,2,1,1\n");
    }

    proptest! {
        #[test]
        fn normalized_values_span_unit_interval(v in prop::collection::vec(-10.0f64..10.0, 2..8)) {
            let n = normalize(&v);
            prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
            if v.iter().any(|x| *x != v[0]) {
                prop_assert!(n.contains(&0.0) && n.contains(&1.0));
            }
        }
    }
}
