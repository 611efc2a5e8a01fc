//! Seeded random streams.
//!
//! All randomness derives from a single `u64` seed. Independent consumers get
//! their own PCG-64 stream: the generator state comes from the seed and the
//! stream selector (the PCG increment) from a fixed per-purpose tag combined
//! with an item index. Two streams with different `(tag, index)` never share
//! a sequence, and a stream's output does not depend on how many other
//! streams were drawn before it. This is what makes per-sample parallel
//! generation reproduce sequential generation exactly.

use rand::RngExt;
use rand_pcg::Pcg64;

pub use rand_pcg::Pcg64 as StreamRng;

pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const DATA: u64 = 0x02;
    pub const SHAPES: u64 = 0x03;
    pub const SHUFFLE: u64 = 0x04;
    pub const BENCH: u64 = 0x05;
    pub const GRADCHECK: u64 = 0x06;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream `index` of family `tag` under `seed`.
pub fn stream(seed: u64, tag: u64, index: u64) -> Pcg64 {
    let state = ((splitmix(seed) as u128) << 64) | splitmix(seed ^ 0xA5A5_A5A5_A5A5_A5A5) as u128;
    let selector = ((tag as u128) << 64) | index as u128;
    Pcg64::new(state, selector)
}

/// Uniform values in `[-bound, bound)`.
pub fn uniform_vec(rng: &mut Pcg64, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn he_uniform(rng: &mut Pcg64, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    uniform_vec(rng, n, bound)
}
