//! Deterministic counter-based random number generation.
//!
//! Outputs are a pure function of the `(seed, counter)` pair: each draw
//! increments the counter and feeds `seed + counter * GAMMA` through a fixed
//! 64-bit finalizer (the SplitMix64 mixer). There is no other hidden state,
//! so a stream can be checkpointed, resumed, or split by counter arithmetic,
//! and identical `(seed, counter)` produces identical output on every
//! platform — integer operations only, with one documented float conversion.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weyl-sequence increment (golden-ratio constant).
pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
/// First finalizer multiplier.
pub const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
/// Second finalizer multiplier.
pub const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

/// Counter-based random stream. Copyable, checkpointable, platform-stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    /// Stream positioned at the beginning (counter 0; no draws made yet).
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    /// Resume a stream from a checkpointed `(seed, counter)` pair.
    pub fn from_state(seed: u64, counter: u64) -> Self {
        RngStream { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of draws made so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Next raw 64-bit word. Advances the counter by exactly 1.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        let mut z = self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA));
        z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
        z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision. One counter step.
    #[inline]
    pub fn next_unit_f64(&mut self) -> f64 {
        // 2^-53; the top 53 bits of the word become the mantissa.
        (self.next_u64() >> 11) as f64 * 1.110_223_024_625_156_5e-16
    }

    /// Uniform draw in the half-open interval `[lo, hi)`.
    ///
    /// The degenerate interval `lo == hi` yields exactly `lo`. Consumes one
    /// counter step per call regardless of the interval. Errors when
    /// `lo > hi` or either bound is non-finite.
    pub fn uniform<T: Scalar>(&mut self, lo: T, hi: T) -> Result<T> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid("uniform", "bounds must be finite"));
        }
        if lo > hi {
            return Err(Error::invalid(
                "uniform",
                format!("lower bound {lo} exceeds upper bound {hi}"),
            ));
        }
        let u = self.next_unit_f64();
        if lo == hi {
            return Ok(lo);
        }
        let (lo64, hi64) = (lo.to_f64c(), hi.to_f64c());
        let x = T::from_f64c(lo64 + (hi64 - lo64) * u);
        // Narrowing can round up to `hi`; clamp back into the half-open range.
        if x >= hi {
            Ok(hi.step_down().max(lo))
        } else if x < lo {
            Ok(lo)
        } else {
            Ok(x)
        }
    }

    /// Uniform index in `[0, n)`. One counter step. Errors when `n == 0`.
    pub fn uniform_index(&mut self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::invalid("uniform_index", "n must be positive"));
        }
        let u = self.next_unit_f64();
        // u < 1 guarantees the product stays below n.
        Ok((u * n as f64) as usize)
    }
}
