//! Seeded random streams.
//!
//! All randomness comes from xoshiro256++ seeded through SplitMix64
//! (`Xoshiro256PlusPlus::seed_from_u64`), whose output stream is fixed by the
//! `rand_xoshiro` crate, so a seed reproduces bit-identical values.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::Tensor;

pub type TensorRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> TensorRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent stream for a named sub-component.
pub fn substream(seed: u64, label: &str) -> TensorRng {
    // FNV-1a over the label, mixed into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seeded(seed ^ h.rotate_left(17))
}

pub fn uniform(rng: &mut TensorRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape and data length agree")
}

/// Fan-in scaled init: uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rng: &mut TensorRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, -bound, bound)
}

pub fn normal(rng: &mut TensorRng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(shape, data).expect("shape and data length agree")
}
