use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ShiftSpec;

/// Regression values or class labels, one per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Values(Vec<f64>),
    Labels { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.len(),
            Targets::Labels { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Targets::Labels { .. })
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Labels { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Targets::Values(v) => Some(v),
            Targets::Labels { .. } => None,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            Targets::Labels { classes, .. } => Some(*classes),
            Targets::Values(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub shifts: Vec<ShiftSpec>,
    pub seed: u64,
}

/// Inputs `[n, d]` with one target per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    targets: Targets,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, provenance: Provenance) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "dataset inputs must be [n, d], got {:?}",
                inputs.shape()
            )));
        }
        if inputs.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: inputs.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if inputs.rows() == 0 {
            return Err(Error::invalid("dataset must hold at least one example"));
        }
        match &targets {
            Targets::Values(v) if v.iter().any(|x| !x.is_finite()) => {
                return Err(Error::NonFinite("dataset targets".into()))
            }
            Targets::Labels { labels, classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::LabelOutOfRange {
                        label: bad,
                        classes: *classes,
                    });
                }
            }
            _ => {}
        }
        Ok(Self {
            inputs,
            targets,
            provenance,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Rows `idx` in order. `idx` must be non-empty.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.inputs.select_rows(idx),
            self.targets.select(idx),
            self.provenance.clone(),
        )
    }

    /// Splits off consecutive chunks of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Dataset>> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(Error::invalid(format!(
                "cannot split {} examples into {sizes:?}",
                self.len()
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let idx: Vec<usize> = (start..start + s).collect();
                start += s;
                self.subset(&idx)
            })
            .collect()
    }

    pub(crate) fn with_parts(&self, inputs: Tensor, targets: Targets, shift: Option<ShiftSpec>) -> Result<Dataset> {
        let mut provenance = self.provenance.clone();
        provenance.shifts.extend(shift);
        Dataset::new(inputs, targets, provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> Dataset {
        Dataset::new(
            Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap(),
            Targets::Labels {
                labels: vec![0, 1, 2],
                classes: 3,
            },
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_labels_and_sizes() {
        let x = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let bad = Targets::Labels { labels: vec![0, 3], classes: 3 };
        assert!(Dataset::new(x.clone(), bad, Provenance::default()).is_err());
        assert!(Dataset::new(x.clone(), Targets::Values(vec![1.0]), Provenance::default()).is_err());
        let empty = Tensor::matrix(0, 1, vec![]).unwrap();
        assert!(Dataset::new(empty, Targets::Values(vec![]), Provenance::default()).is_err());
    }

    #[test]
    fn split_is_consecutive() {
        let parts = ds().split(&[1, 2]).unwrap();
        assert_eq!(parts[0].x(0), &[1., 2.]);
        assert_eq!(parts[1].targets().labels().unwrap(), &[1, 2]);
        assert!(ds().split(&[2, 2]).is_err());
    }
}
