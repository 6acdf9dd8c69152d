//! Robust order statistics: median, median absolute deviation, percentile.
//!
//! Conventions (fixed, relied on by downstream thresholding):
//! - median of an even-length sequence is the mean of the two central order
//!   statistics;
//! - percentile uses linear interpolation between closest ranks, with the
//!   rank of `q` defined as `q/100 * (n-1)`;
//! - MAD is the median of absolute deviations from the median, reported raw
//!   (no consistency factor baked in — callers scale it themselves).
//!
//! Selection is `O(n)` per order statistic (quickselect), with a NaN-safe
//! total order so results are deterministic for any input bit pattern.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// k-th order statistic (0-based) of a scratch buffer. `k < buf.len()`.
fn order_stat<T: Scalar>(buf: &mut [T], k: usize) -> T {
    let (_, kth, _) = buf.select_nth_unstable_by(k, |a, b| a.total_order(*b));
    *kth
}

/// Minimum under the total order (used for the next order statistic after a
/// partition, avoiding a second full select).
fn min_total<T: Scalar>(values: &[T]) -> T {
    let mut m = values[0];
    for &v in &values[1..] {
        if v.total_order(m) == std::cmp::Ordering::Less {
            m = v;
        }
    }
    m
}

/// Median with the average-of-two convention for even lengths.
///
/// Errors on empty input.
pub fn median<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median"));
    }
    let mut buf = values.to_vec();
    let n = buf.len();
    if n % 2 == 1 {
        Ok(order_stat(&mut buf, n / 2))
    } else {
        let lo = order_stat(&mut buf, n / 2 - 1);
        // After selection everything right of the pivot is >= it, so the
        // next order statistic is the minimum of that partition.
        let hi = min_total(&buf[n / 2..]);
        Ok((lo + hi) / T::from_f64c(2.0))
    }
}

/// Median absolute deviation: `median(|v - median(values)|)`.
///
/// Errors on empty input.
pub fn mad<T: Scalar>(values: &[T]) -> Result<T> {
    let m = median(values)?;
    let devs: Vec<T> = values.iter().map(|&v| (v - m).abs()).collect();
    median(&devs)
}

/// Percentile via linear interpolation between closest ranks.
///
/// `q` is in `[0, 100]`; the fractional rank is `q/100 * (n-1)`, so `q=0`
/// is the minimum and `q=100` the maximum. Errors on empty input or `q`
/// outside its domain.
pub fn percentile<T: Scalar>(values: &[T], q: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(
            "percentile",
            format!("q={q} outside [0, 100]"),
        ));
    }
    let mut buf = values.to_vec();
    let n = buf.len();
    let rank = q / 100.0 * (n - 1) as f64;
    let lo_idx = rank.floor() as usize;
    let frac = rank - lo_idx as f64;
    let lo = order_stat(&mut buf, lo_idx);
    if frac == 0.0 {
        return Ok(lo);
    }
    let hi = min_total(&buf[lo_idx + 1..]);
    Ok(T::from_f64c(
        lo.to_f64c() + (hi.to_f64c() - lo.to_f64c()) * frac,
    ))
}
