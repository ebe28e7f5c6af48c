//! Seed plumbing. Every random draw in the crate comes from a ChaCha8
//! stream whose seed is derived from a root seed plus a purpose tag, so
//! results never depend on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(parent, tag, index)`.
pub fn derive_seed(parent: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(parent ^ 0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
