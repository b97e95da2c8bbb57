//! Shared fixtures for the criterion benches.

use dosegan::io::Config;
use dosegan::networks::Generator;
use dosegan::training::generator_config;
use dosegan::{Tensor, Volume};

/// Deterministic pseudo-random fill in `[-1, 1]`.
pub fn tensor(shape: &[usize], salt: u32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f32 * 0.618_034 + salt as f32 * 0.414_214).sin() * 43_758.547).fract()).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

pub fn volume(d: usize, salt: u32) -> Volume {
    let t = tensor(&[1, 1, d, d, d], salt);
    Volume::cube(d, t.data().iter().map(|v| 100.0 + 50.0 * v).collect()).expect("cube")
}

/// Default generator at edge length `d`.
pub fn generator(d: usize) -> Generator {
    let mut config = Config::default();
    config.phantom.size = d;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Generator::new(generator_config(&config), &mut rng).expect("valid config")
}
