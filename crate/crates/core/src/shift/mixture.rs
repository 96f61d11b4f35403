use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

use super::{Dataset, Provenance, Targets};

/// Isotropic Gaussian clusters, one per class, with random centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub dim: usize,
    pub classes: usize,
    /// Norm scale of the class centers: each center is `N(0, separation²/dim · I)`.
    pub separation: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    spec: GaussianMixtureSpec,
    means: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(spec: GaussianMixtureSpec, seed: u64) -> Result<Self> {
        if spec.dim == 0 || spec.classes < 2 {
            return Err(Error::invalid("mixture needs dim >= 1 and at least two classes"));
        }
        if !(spec.separation > 0.0 && spec.noise_std >= 0.0) {
            return Err(Error::invalid("mixture needs separation > 0 and noise_std >= 0"));
        }
        let mut rng = seed::rng(seed::derive(seed, &["mixture", "means"]));
        let scale = spec.separation / (spec.dim as f64).sqrt();
        let means = (0..spec.classes)
            .map(|_| {
                (0..spec.dim)
                    .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        Ok(Self { spec, means })
    }

    pub fn spec(&self) -> &GaussianMixtureSpec {
        &self.spec
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `n ≥ 1` examples with uniformly random labels.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let (d, c) = (self.spec.dim, self.spec.classes);
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..c);
            labels.push(y);
            for &m in &self.means[y] {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + self.spec.noise_std * z);
            }
        }
        Dataset::new(
            Tensor::matrix(n, d, data)?,
            Targets::Labels { labels, classes: c },
            Provenance::default(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_seeded() {
        let spec = GaussianMixtureSpec {
            dim: 4,
            classes: 3,
            separation: 3.0,
            noise_std: 0.5,
        };
        let g = GaussianMixture::new(spec.clone(), 1).unwrap();
        let a = g.sample(20, &mut seed::rng(9)).unwrap();
        let b = GaussianMixture::new(spec, 1).unwrap().sample(20, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.targets().labels().unwrap().iter().all(|&l| l < 3));
    }
}
