use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

pub type ParamRng = ChaCha8Rng;

pub fn param_rng(seed: u64) -> ParamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Glorot-uniform `[out, in]` matrix scaled by `gain`.
pub fn glorot(rng: &mut ParamRng, out_dim: usize, in_dim: usize, gain: f64) -> Tensor {
    let limit = gain * (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_vec(&[out_dim, in_dim], data).expect("shape matches data")
}

/// Deterministic permutation of `0..n` for one epoch of a seeded run.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
