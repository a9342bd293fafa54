//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by a 64-bit seed and selected
//! by a 64-bit stream id, so `(seed, stream)` fully determines the sequence
//! on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub type StreamRng = ChaCha8Rng;

/// Opens stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child stream id from a parent id and a label, for nested
/// splitting (e.g. one stream per sampled image).
pub fn split(parent: u64, label: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = parent ^ label.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Exact position of a stream, enough to resume it bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn save_state(rng: &StreamRng) -> RngState {
    RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
}

pub fn restore_state(state: &RngState) -> StreamRng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}

pub fn normal<T: Scalar>(rng: &mut StreamRng) -> T {
    let v: f64 = rng.sample(StandardNormal);
    T::lit(v)
}

pub fn normal_vec<T: Scalar>(rng: &mut StreamRng, len: usize, std: f64) -> Vec<T> {
    (0..len)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            T::lit(v * std)
        })
        .collect()
}

pub fn normal_tensor<T: Scalar>(rng: &mut StreamRng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::new(shape, normal_vec(rng, numel(shape), std)).expect("shape and data agree")
}

pub fn uniform_tensor<T: Scalar>(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let data = (0..numel(shape)).map(|_| T::lit(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}
