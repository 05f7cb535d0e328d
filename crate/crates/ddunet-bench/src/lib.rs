//! Shared input builders for the benchmark targets.

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use ddunet_core::{DdunetConfig, DdunetModel, Tensor};

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

pub fn random_images(seed: u64, batch: usize, size: usize) -> Tensor<f32> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n = batch * 3 * size * size;
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect();
    Tensor::new(vec![batch, 3, size, size], data).expect("shape/data agree")
}

pub fn model(base_channels: usize, input_size: usize) -> DdunetModel<f32> {
    let config = DdunetConfig {
        base_channels,
        input_size,
        ..DdunetConfig::default()
    };
    DdunetModel::new(config, 7).expect("valid benchmark config")
}
