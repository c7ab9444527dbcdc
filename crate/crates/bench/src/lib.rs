//! Inputs shared by the benchmarks.

use datr_core::datasets::{gen_synthetic, DatasetManifest, SynthOptions};
use datr_core::model::DomainSpec;
use datr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic pseudo-random tensor with values in `[-1, 1)`.
pub fn filled(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// The two toy domains used by the training benchmarks.
pub fn toy_domains() -> Vec<DatasetManifest> {
    [("alpha", 3), ("beta", 5)]
        .iter()
        .zip(100..)
        .map(|(&(n, k), seed)| gen_synthetic(&DomainSpec::synthetic(n, k), 20, seed, SynthOptions::default()).unwrap())
        .collect()
}
