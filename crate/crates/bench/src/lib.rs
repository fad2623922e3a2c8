//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unime_core::data_synth::{generate_case, PhantomParams};
use unime_core::{MultimodalCase, Tensor, UniEncoderConfig};

/// The desk-preset encoder.
pub fn desk_encoder() -> UniEncoderConfig {
    UniEncoderConfig {
        patch: 8,
        d_embed: 96,
        layers: 4,
        heads: 6,
        registers: 4,
        rope_base: 10000.0,
    }
}

pub fn phantom(seed: u64, side: usize) -> MultimodalCase {
    generate_case(seed, [side; 3], &PhantomParams::default(), 8).expect("valid phantom")
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

pub fn random_mask(side: usize, fill: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = side as f64 / 2.0;
    (0..side * side * side)
        .map(|i| {
            let (z, y, x) = (i / (side * side), (i / side) % side, i % side);
            let r = ((z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            r < c * fill && rng.random::<f64>() > 0.05
        })
        .collect()
}
