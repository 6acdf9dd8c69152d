//! Scalar abstraction: every numeric kernel is generic over the float width.
//!
//! Model inference runs in `f32`; the verification math runs in `f64`. Both
//! widths share the same code paths, so a property established in one width
//! is structurally identical in the other. Concrete aliases live at the
//! crate root ([`crate::Tensor32`], [`crate::Tensor64`]).

use std::cmp::Ordering;

/// Floating point scalar: `f32` or `f64`.
///
/// On top of the `num_traits` float surface this adds what deterministic
/// numerics need: a total order for sorting (NaN-safe and stable across
/// platforms), a `step_down` used to clamp half-open intervals, and explicit
/// widths conversions for reporting.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Total order over all bit patterns, consistent with `<` on finite values.
    fn total_order(self, other: Self) -> Ordering;

    /// Largest representable value strictly below `self`.
    fn step_down(self) -> Self;

    /// Nearest representable value to an `f64` constant.
    fn from_f64c(v: f64) -> Self;

    /// Widen to `f64` (exact for both supported widths' finite values).
    fn to_f64c(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn total_order(self, other: Self) -> Ordering {
        self.total_cmp(&other)
    }

    #[inline(always)]
    fn step_down(self) -> Self {
        self.next_down()
    }

    #[inline(always)]
    fn from_f64c(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn total_order(self, other: Self) -> Ordering {
        self.total_cmp(&other)
    }

    #[inline(always)]
    fn step_down(self) -> Self {
        self.next_down()
    }

    #[inline(always)]
    fn from_f64c(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64c(self) -> f64 {
        self
    }
}
