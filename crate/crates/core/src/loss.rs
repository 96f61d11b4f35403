//! Loss functions, each available as a plain evaluation and as a tape
//! recording for differentiation.

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on `sum(p) = 1` for probability inputs.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Batch mean of per-example squared residuals.
///
/// `pred` and `y` must have equal shapes; the leading axis is the batch. For
/// multi-output predictions the per-example loss sums over outputs.
pub fn squared_loss(pred: &Tensor, y: &Tensor) -> Result<f64> {
    if pred.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "squared_loss",
            lhs: pred.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(total / pred.rows() as f64)
}

pub fn squared_loss_on(tape: &mut Tape, pred: Var, y: Var) -> Result<Var> {
    let (ps, ys) = (tape.value(pred).shape().to_vec(), tape.value(y).shape().to_vec());
    if ps != ys {
        return Err(Error::ShapeMismatch {
            op: "squared_loss",
            lhs: ps,
            rhs: ys,
        });
    }
    let batch = tape.value(pred).rows();
    let diff = tape.sub(pred, y)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scalar_mul(total, 1.0 / batch as f64)
}

/// Mean negative log-softmax of the true class, max-subtracted.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone())?;
    let ce = tape.cross_entropy(l, labels)?;
    Ok(tape.value(ce).data()[0])
}

pub fn cross_entropy_on(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Shannon entropy of one probability vector (natural log, `0 ln 0 = 0`).
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Entropy `H(p̄)` of the elementwise mean of several probability vectors.
pub fn marginal_entropy(prob_sets: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = prob_sets.first() else {
        return Err(Error::invalid("marginal entropy of an empty set"));
    };
    let c = first.len();
    let mut mean = vec![0.0; c];
    for (index, p) in prob_sets.iter().enumerate() {
        if p.len() != c {
            return Err(Error::ShapeMismatch {
                op: "marginal_entropy",
                lhs: vec![c],
                rhs: vec![p.len()],
            });
        }
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&q| q < 0.0 || !q.is_finite()) || (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::NotNormalized { index, sum });
        }
        mean.iter_mut().zip(p).for_each(|(m, q)| *m += q);
    }
    let n = prob_sets.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(entropy(&mean))
}

/// Records `H(mean_i softmax(logits_i))` for `[k, classes]` logits.
pub fn marginal_entropy_on(tape: &mut Tape, logits: Var) -> Result<Var> {
    let probs = tape.softmax_rows(logits)?;
    let mean = tape.mean_rows(probs)?;
    tape.entropy(mean)
}

/// Row-wise softmax probabilities as nested vectors.
pub fn probabilities(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let p = softmax_rows(logits)?;
    Ok((0..p.rows()).map(|i| p.row(i).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn squared_loss_examples() {
        let y = Tensor::vector(vec![1.5, -2.0]).unwrap();
        assert_eq!(squared_loss(&y, &y).unwrap(), 0.0);
        let p = Tensor::vector(vec![0.0]).unwrap();
        let t = Tensor::vector(vec![3.0]).unwrap();
        assert_eq!(squared_loss(&p, &t).unwrap(), 9.0);
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let t = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(squared_loss(&p, &t).unwrap(), 2.5);
        assert!(squared_loss(&p, &Tensor::vector(vec![0.0]).unwrap()).is_err());
    }

    #[test]
    fn squared_loss_tape_matches_plain() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let t = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let pv = tape.param(p).unwrap();
        let tv = tape.constant(t).unwrap();
        let l = squared_loss_on(&mut tape, pv, tv).unwrap();
        assert_eq!(tape.value(l).data(), &[2.5]);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(pv).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let c = 7;
        let uniform = Tensor::matrix(2, c, vec![0.3; 2 * c]).unwrap();
        let ce = cross_entropy_loss(&uniform, &[0, 6]).unwrap();
        assert!((ce - (c as f64).ln()).abs() < 1e-15);

        let extreme = Tensor::matrix(1, 2, vec![1000.0, -1000.0]).unwrap();
        let ce = cross_entropy_loss(&extreme, &[0]).unwrap();
        assert!(ce.is_finite() && ce.abs() < 1e-12);

        let l = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let ce = cross_entropy_loss(&l, &[0]).unwrap();
        // -ln sigma(1) = ln(1 + e^-1)
        assert!((ce - 0.313_261_687_518_222_8).abs() < 1e-12, "{ce}");

        assert!(matches!(
            cross_entropy_loss(&l, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn marginal_entropy_examples() {
        let one_hot = vec![vec![0.0, 1.0, 0.0]; 4];
        assert_eq!(marginal_entropy(&one_hot).unwrap(), 0.0);
        let c = 5;
        let uniform = vec![vec![1.0 / c as f64; c]; 3];
        assert!((marginal_entropy(&uniform).unwrap() - (c as f64).ln()).abs() < 1e-12);
        let pair = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((marginal_entropy(&pair).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            marginal_entropy(&[vec![0.5, 0.6]]),
            Err(Error::NotNormalized { .. })
        ));
    }

    fn prob_vec(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-3;
            let mut p: Vec<f64> = v.iter().map(|x| (x + 1e-3 / v.len() as f64) / s).collect();
            let err: f64 = 1.0 - p.iter().sum::<f64>();
            p[0] += err;
            p
        })
    }

    proptest! {
        #[test]
        fn marginal_entropy_is_concave(sets in (2usize..6).prop_flat_map(|c| prop::collection::vec(prob_vec(c), 1..6))) {
            let h = marginal_entropy(&sets).unwrap();
            let mean_h = sets.iter().map(|p| entropy(p)).sum::<f64>() / sets.len() as f64;
            prop_assert!(h + 1e-12 >= mean_h);
        }

        #[test]
        fn cross_entropy_non_negative(logits in prop::collection::vec(-50.0f64..50.0, 6), label in 0usize..3) {
            let t = Tensor::matrix(2, 3, logits).unwrap();
            prop_assert!(cross_entropy_loss(&t, &[label, 2 - label]).unwrap() >= 0.0);
        }
    }
}
