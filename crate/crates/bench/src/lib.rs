//! Inputs shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drpan_core::{ScoreMap, Tensor, TrainConfig, TrainState};

pub fn random_map(size: usize, seed: u64) -> ScoreMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..size * size).map(|_| rng.random::<f64>()).collect();
    ScoreMap::new(size, values, 8 * size).expect("valid map")
}

pub fn random_batch(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// The toy acceptance architecture at 64×64: widths 8, three residual blocks.
pub fn toy_config(batch_size: usize) -> TrainConfig {
    let text = format!(
        "batch_size = {batch_size}\n[geometry]\nimage_size = 64\nregion_size = 16\n\
         [generator]\nbase_width = 8\nresidual_blocks = 3\n\
         [discriminator]\nbase_width = 8\n[reviser]\nbase_width = 8\n"
    );
    TrainConfig::from_toml_str(&text, &[]).expect("valid config")
}

pub fn toy_state(batch_size: usize) -> TrainState {
    TrainState::new(toy_config(batch_size)).expect("valid state")
}
