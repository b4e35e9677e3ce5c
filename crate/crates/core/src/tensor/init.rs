//! Seeded parameter initialization.
//!
//! Every random draw in the library flows through a ChaCha8 generator so a
//! run is reproducible from one u64 seed. Sub-seeds are derived by hashing
//! the parent seed with a label, which keeps component streams independent
//! of the order they are created in.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Deterministic generator for `seed`.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable sub-seed for a named component (FNV-1a over the label, folded
/// into the parent seed). Adding a new consumer never shifts the streams
/// of existing ones.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    parent ^ h
}

/// Xavier/Glorot uniform weight matrix of shape `[fan_out, fan_in]`.
pub fn xavier(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data: Vec<f64> = (0..fan_out * fan_in).map(|_| dist.sample(rng)).collect();
    Tensor::param(&[fan_out, fan_in], data).expect("finite xavier draw")
}

/// Uniform draw in `[lo, hi)` with the given shape, as a trainable leaf.
pub fn uniform_param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::param(shape, data).expect("finite uniform draw")
}
