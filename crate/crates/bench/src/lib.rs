//! Shared fixtures for the benchmarks.

use exaggerator_core::blackbox::ConvClassifier;
use exaggerator_core::synthdata::{generate_synthetic, SynthFactorSpec};
use exaggerator_core::{LabeledImageDataset, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

pub fn features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Desk-sized synthetic data and an untrained classifier.
pub fn desk(samples: usize) -> (LabeledImageDataset, ConvClassifier<f32>) {
    let ds = generate_synthetic(&SynthFactorSpec {
        samples,
        seed: 1,
        ..Default::default()
    })
    .expect("synthetic data");
    let clf = ConvClassifier::new(ds.image_shape(), [8, 16, 32], 0).expect("classifier");
    (ds, clf)
}
