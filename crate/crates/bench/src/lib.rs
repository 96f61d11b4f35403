//! Fixtures shared by the benchmarks.

use rand_distr::{Distribution, StandardNormal};
use surgift_core::shift::{Dataset, Provenance, Targets};
use surgift_core::{seed, Model, ModelSpec, Tensor};

/// The default experiment network: 32 inputs, three blocks of width 64,
/// 10 classes, with a labelled batch of `n` random inputs.
pub fn mlp_fixture(n: usize) -> (Model, Dataset) {
    let mut rng = seed::rng(7);
    let model = Model::new(ModelSpec::mlp(32, vec![64, 64, 64], 10, 3), &mut rng).expect("valid spec");
    let x: Vec<f64> = (0..n * 32).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = (0..n).map(|i| i % 10).collect();
    let ds = Dataset::new(
        Tensor::matrix(n, 32, x).expect("finite inputs"),
        Targets::Labels { labels, classes: 10 },
        Provenance::default(),
    )
    .expect("consistent dataset");
    (model, ds)
}
