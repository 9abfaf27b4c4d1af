//! Seeded pseudo-random numbers.
//!
//! The generator is xoshiro256** with its 256-bit state filled from the
//! 64-bit seed by SplitMix64 (the reference seeding procedure). Derived
//! draws are defined so other implementations can reproduce them exactly:
//!
//! * `uniform`: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal`: Box-Muller, cosine branch only, one standard normal per two
//!   uniforms: `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`.
//! * `below(n)`: `floor(uniform * n)`.
//! * `categorical(w)`: first index whose running sum exceeds one uniform.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{ApeError, Result};

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `(seed, stream)`, used to hand each
    /// question its own generator regardless of processing order.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Rng::seeded(splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Samples an index with probability `weights[i]`. Weights must be
    /// finite, non-negative and sum to one.
    pub fn categorical(&mut self, weights: &[f64]) -> Result<usize> {
        if weights.is_empty() {
            return Err(ApeError::Argument("categorical over empty weights".into()));
        }
        let mut total = 0.0;
        for &w in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(ApeError::Argument(format!("invalid categorical weight {w}")));
            }
            total += w;
        }
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(ApeError::Argument(format!(
                "categorical weights sum to {total}, expected 1"
            )));
        }
        let u = self.uniform();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = i;
            }
            acc += w;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(last_positive)
    }

    /// Fisher-Yates shuffle driven by `below`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
