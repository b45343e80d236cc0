//! Deterministic random number generation.
//!
//! Everything random in this crate flows through two primitives built on the
//! SplitMix64 finalizer: a sequential stream ([`DetRng`]) for shuffles and
//! initialization, and a stateless counter form ([`normal_at`]) that maps a
//! `(master seed, step, element)` key straight to a Gaussian draw. The counter
//! form makes noise reproducible regardless of evaluation order, so two runs
//! that share a seed see identical noise even if their surrounding code walks
//! elements differently.

use std::f64::consts::TAU;

/// Weyl-sequence increment used by SplitMix64.
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// 2^-53, for converting the top 53 bits of a u64 into a unit double.
const UNIT_53: f64 = 1.0 / 9_007_199_254_740_992.0;

#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bijective 64-bit mixer with full avalanche.
#[inline]
pub fn mix64(z: u64) -> u64 {
    finalize(z.wrapping_add(GOLDEN_GAMMA))
}

/// Collapses a seed and a purpose tag into the seed of an independent stream.
///
/// Distinct tags give unrelated streams from the same master seed, which keeps
/// e.g. parameter initialization independent of batch shuffling.
#[inline]
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag))
}

#[inline]
fn box_muller(a: u64, b: u64) -> f64 {
    // u1 in (0, 1] so the log is finite; u2 in [0, 1).
    let u1 = ((a >> 11) as f64 + 1.0) * UNIT_53;
    let u2 = (b >> 11) as f64 * UNIT_53;
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// One standard normal draw addressed by `(master, step, index)`.
///
/// Stateless: the same key always yields the same value, and nearby keys are
/// uncorrelated. Safe to evaluate concurrently for disjoint index ranges.
#[inline]
pub fn normal_at(master: u64, step: u64, index: u64) -> f64 {
    let key = mix64(mix64(master ^ mix64(step)) ^ index);
    // Two decorrelated uniforms from the key; the tweak constants are the
    // leading fraction bits of pi.
    let a = mix64(key ^ 0x2434_F6A8_885A_308D);
    let b = mix64(key ^ 0x1319_8A2E_0370_7344);
    box_muller(a, b)
}

/// Small sequential generator (SplitMix64) for shuffles, splits, and synthetic
/// data. Never used for privacy noise; noise goes through [`normal_at`].
#[derive(Debug, Clone)]
pub struct DetRng {
    state: u64,
}

impl DetRng {
    pub fn new(seed: u64, tag: u64) -> Self {
        DetRng { state: derive(seed, tag) }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        finalize(self.state)
    }

    /// Uniform double in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * UNIT_53
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal draw from the stream.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        let a = self.next_u64();
        let b = self.next_u64();
        box_muller(a, b)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

// ============================================================================
