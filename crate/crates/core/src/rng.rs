//! Seeded generator for reproducible fixtures.
//!
//! The stream is SplitMix64 (Steele, Lea & Flood) with its published
//! constants, so any language can regenerate identical inputs:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out = z ^ (z >> 31)
//! ```
//!
//! Uniforms take the top 53 bits: `u = (out >> 11) * 2^-53`, in `[0, 1)`.
//! Normals use one Box-Muller draw per pair of uniforms, cosine branch only:
//! `sqrt(-2 ln(1 - u1)) * cos(2π u2)`.
//!
//! Tensors are filled row-major, one normal per element.

use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle driven by [`SplitMix64::next_below`].
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows x cols` tensor of independent `N(0, std²)` draws.
pub fn gaussian_tensor<T: Real>(rng: &mut SplitMix64, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::lit(rng.next_normal() * std))
}

/// Derives an independent sub-seed; used to give Q, K, V their own streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    SplitMix64::new(seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)).next_u64()
}
