//! Seedable, splittable random streams.
//!
//! An [`RngKey`] names a stream; `fold` derives child keys deterministically so
//! that e.g. the shuffle of sequence `i` depends only on `(seed, step, i)`,
//! never on what else shares the batch. Streams are ChaCha8, a counter-based
//! generator keyed by the 64-bit key.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(splitmix64(seed))
    }

    /// Child key for `data`.
    pub fn fold(self, data: u64) -> Self {
        RngKey(splitmix64(self.0 ^ splitmix64(data.wrapping_mul(0xD6E8_FEB8_6659_FD93))))
    }

    /// Child key for a string label (FNV-1a of the bytes).
    pub fn fold_str(self, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.fold(h)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Normal samples redrawn until they fall within two standard deviations.
pub fn trunc_normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Xavier/Glorot uniform init for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_tensor(&[fan_in, fan_out], -a, a, rng)
}
