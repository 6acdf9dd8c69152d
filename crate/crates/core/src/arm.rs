//! Activation redistribution hook: pushes near-zero MLP gate activations
//! away from zero without flipping signs.
//!
//! Pipeline (statistics are computed once, over the unmodified input):
//!
//! 1. threshold: `eps = kappa * MAD * c` marks entries with `|a| <= eps` as
//!    near-zero;
//! 2. fraction: the observed near-zero proportion is clipped into
//!    `[p_min, p_max]` — or replaced outright in direct-p mode, for inputs
//!    whose near-zero mass far exceeds any reasonable clip ceiling;
//! 3. selection: the `round(fraction * N)` smallest-|value| entries, ties
//!    broken by ascending flat index;
//! 4. perturbation: each selected entry gains a uniform draw from a
//!    sign-dependent range — `[0, Q_p1]` for non-negative entries,
//!    `[min, 0]` for negative ones — so entries only move outward. Ranges
//!    that would invert (`hi < lo`) collapse to `[0, 0]`.
//!
//! Draws happen in selection order (ascending |value|), so a seed pins the
//! output bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::stats::{mad, percentile};
use crate::tensor::Tensor;
use crate::transformer::ActivationHook;

/// MAD-to-standard-deviation consistency factor for Gaussian data.
pub const KAPPA_GAUSSIAN: f64 = 1.4826;
/// Default lower clip for the modified fraction.
pub const DEFAULT_P_MIN: f64 = 0.02;
/// Default upper clip for the modified fraction.
pub const DEFAULT_P_MAX: f64 = 0.25;

/// How the modified fraction is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FractionMode {
    /// Observed near-zero proportion under the MAD threshold, clipped into
    /// `[p_min, p_max]`.
    MadThreshold,
    /// Fixed fraction, bypassing both the threshold and the clip.
    DirectP(f64),
}

/// Which population the statistics and selection run over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmScope {
    /// One set of statistics over the whole tensor.
    FullTensor,
    /// Independent statistics and selection per row of a 2-D tensor.
    PerToken,
}

/// Hook configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    /// Positive scale applied to the MAD when forming the threshold.
    pub c: f64,
    /// Dispersion consistency factor (default [`KAPPA_GAUSSIAN`]).
    pub kappa: f64,
    /// Fraction clip bounds, `0 < p_min <= p_max <= 1`.
    pub p_min: f64,
    pub p_max: f64,
    /// Upper percentile (in `(0, 100]`) bounding positive perturbations.
    pub p1: f64,
    pub mode: FractionMode,
    pub scope: ArmScope,
    pub seed: u64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig {
            c: 0.13,
            kappa: KAPPA_GAUSSIAN,
            p_min: DEFAULT_P_MIN,
            p_max: DEFAULT_P_MAX,
            p1: 99.5,
            mode: FractionMode::MadThreshold,
            scope: ArmScope::FullTensor,
            seed: 0,
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.c.is_finite() || self.c <= 0.0 {
            return Err(Error::invalid("arm_config", "c must be positive"));
        }
        if !self.kappa.is_finite() || self.kappa <= 0.0 {
            return Err(Error::invalid("arm_config", "kappa must be positive"));
        }
        if !(self.p_min > 0.0 && self.p_min <= self.p_max && self.p_max <= 1.0) {
            return Err(Error::invalid(
                "arm_config",
                format!(
                    "fraction clip must satisfy 0 < p_min <= p_max <= 1, got [{}, {}]",
                    self.p_min, self.p_max
                ),
            ));
        }
        if !(self.p1 > 0.0 && self.p1 <= 100.0) {
            return Err(Error::invalid("arm_config", "p1 must be in (0, 100]"));
        }
        if let FractionMode::DirectP(p) = self.mode {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid("arm_config", "direct p must be in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Entries picked for perturbation, in ascending-|value| order (ties by
/// ascending flat index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArmSelection {
    pub indices: Vec<usize>,
    /// Sign steering each entry's range; `sign(±0) = +1`.
    pub signs: Vec<i8>,
}

/// One application's summary, emitted as a single JSON object.
///
/// In per-token scope, scalar fields are means over rows and `n_modified`
/// is the total. In direct-p mode, `epsilon` and `p_raw` are diagnostic
/// (computed with the configured `c` but not used for selection).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub epsilon: f64,
    pub p_raw: f64,
    pub fraction: f64,
    pub n_modified: usize,
    /// Upper percentile `Q_p1` of the unmodified input.
    pub q_upper: f64,
    /// Minimum of the unmodified input.
    pub min_act: f64,
}

// ── contract functions ──────────────────────────────────────────────────────

/// Near-zero threshold `eps = kappa * MAD(acts) * c`.
pub fn near_zero_threshold<T: Scalar>(acts: &Tensor<T>, cfg: &ArmConfig) -> Result<f64> {
    cfg.validate()?;
    if acts.is_empty() {
        return Err(Error::EmptyInput("near_zero_threshold"));
    }
    let m = mad(acts.data())?;
    Ok(cfg.kappa * m.to_f64c() * cfg.c)
}

/// Proportion of entries with `|a| <= eps`.
pub fn raw_fraction<T: Scalar>(acts: &Tensor<T>, eps: f64) -> Result<f64> {
    if acts.is_empty() {
        return Err(Error::EmptyInput("raw_fraction"));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::invalid("raw_fraction", "eps must be finite and >= 0"));
    }
    let n = acts
        .data()
        .iter()
        .filter(|a| a.abs().to_f64c() <= eps)
        .count();
    Ok(n as f64 / acts.len() as f64)
}

/// Final modified fraction: clipped into `[p_min, p_max]` in MAD mode, the
/// fixed override in direct-p mode.
pub fn clip_fraction(p_raw: f64, cfg: &ArmConfig) -> Result<f64> {
    cfg.validate()?;
    match cfg.mode {
        FractionMode::MadThreshold => Ok(p_raw.clamp(cfg.p_min, cfg.p_max)),
        FractionMode::DirectP(p) => Ok(p),
    }
}

fn select_slice<T: Scalar>(data: &[T], fraction: f64) -> Result<ArmSelection> {
    if data.is_empty() {
        return Err(Error::EmptyInput("select"));
    }
    if !fraction.is_finite() || !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("select", "fraction must be in [0, 1]"));
    }
    let n = data.len();
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let by_magnitude = |&a: &usize, &b: &usize| {
        data[a]
            .abs()
            .total_order(data[b].abs())
            .then(a.cmp(&b))
    };
    if k == 0 {
        return Ok(ArmSelection {
            indices: vec![],
            signs: vec![],
        });
    }
    // Partition so the k smallest magnitudes are in front, then order just
    // that prefix: O(n + k log k).
    if k < n {
        order.select_nth_unstable_by(k - 1, by_magnitude);
        order.truncate(k);
    }
    order.sort_unstable_by(by_magnitude);
    let signs = order
        .iter()
        .map(|&i| if data[i] < T::zero() { -1i8 } else { 1i8 })
        .collect();
    Ok(ArmSelection {
        indices: order,
        signs,
    })
}

/// Select the `round(fraction * N)` smallest-|value| entries of the tensor.
pub fn select<T: Scalar>(acts: &Tensor<T>, fraction: f64) -> Result<ArmSelection> {
    select_slice(acts.data(), fraction)
}

fn range_from_stats<T: Scalar>(q_upper: T, min_act: T, sign: i8) -> (T, T) {
    let (lo, hi) = if sign >= 0 {
        (T::zero(), q_upper)
    } else {
        (min_act, T::zero())
    };
    if hi < lo {
        (T::zero(), T::zero())
    } else {
        (lo, hi)
    }
}

/// Sign-dependent perturbation range over the whole tensor's statistics:
/// `[0, Q_p1]` for `sign >= 0`, `[min, 0]` for `sign < 0`; inverted ranges
/// collapse to `[0, 0]`.
pub fn perturbation_range<T: Scalar>(
    acts: &Tensor<T>,
    sign: i8,
    cfg: &ArmConfig,
) -> Result<(T, T)> {
    cfg.validate()?;
    if acts.is_empty() {
        return Err(Error::EmptyInput("perturbation_range"));
    }
    let q_upper = percentile(acts.data(), cfg.p1)?;
    let min_act = percentile(acts.data(), 0.0)?;
    Ok(range_from_stats(q_upper, min_act, sign))
}

/// Per-slice report before aggregation.
struct SliceReport {
    epsilon: f64,
    p_raw: f64,
    fraction: f64,
    n_modified: usize,
    q_upper: f64,
    min_act: f64,
}

fn apply_slice<T: Scalar>(
    data: &mut [T],
    cfg: &ArmConfig,
    rng: &mut RngStream,
) -> Result<SliceReport> {
    // Statistics over the unmodified input, computed exactly once.
    let m = mad(data)?;
    let epsilon = cfg.kappa * m.to_f64c() * cfg.c;
    let near = data
        .iter()
        .filter(|a| a.abs().to_f64c() <= epsilon)
        .count();
    let p_raw = near as f64 / data.len() as f64;
    let fraction = match cfg.mode {
        FractionMode::MadThreshold => p_raw.clamp(cfg.p_min, cfg.p_max),
        FractionMode::DirectP(p) => p,
    };
    let q_upper = percentile(data, cfg.p1)?;
    let min_act = percentile(data, 0.0)?;
    let selection = select_slice(data, fraction)?;
    for (&idx, &sign) in selection.indices.iter().zip(&selection.signs) {
        let (lo, hi) = range_from_stats(q_upper, min_act, sign);
        let draw = rng.uniform(lo, hi)?;
        data[idx] += draw;
    }
    Ok(SliceReport {
        epsilon,
        p_raw,
        fraction,
        n_modified: selection.indices.len(),
        q_upper: q_upper.to_f64c(),
        min_act: min_act.to_f64c(),
    })
}

/// Apply the redistribution to a tensor, returning the perturbed copy and a
/// report. Unselected entries are bit-identical to the input; selected
/// entries move weakly outward (`acts'[i] >= acts[i]` for `sign = +1`,
/// `<=` for `sign = -1`). Same `(tensor, config, seed)` gives bit-identical
/// output.
pub fn apply<T: Scalar>(
    acts: &Tensor<T>,
    cfg: &ArmConfig,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, ArmReport)> {
    cfg.validate()?;
    if acts.is_empty() {
        return Err(Error::EmptyInput("arm_apply"));
    }
    acts.ensure_finite("arm_apply")?;
    let mut out = acts.clone();
    let report = match cfg.scope {
        ArmScope::FullTensor => {
            let r = apply_slice(out.data_mut(), cfg, rng)?;
            ArmReport {
                epsilon: r.epsilon,
                p_raw: r.p_raw,
                fraction: r.fraction,
                n_modified: r.n_modified,
                q_upper: r.q_upper,
                min_act: r.min_act,
            }
        }
        ArmScope::PerToken => {
            let (rows, cols) = out.dims2("arm_apply")?;
            if cols == 0 {
                return Err(Error::EmptyInput("arm_apply"));
            }
            let mut acc = ArmReport {
                epsilon: 0.0,
                p_raw: 0.0,
                fraction: 0.0,
                n_modified: 0,
                q_upper: 0.0,
                min_act: 0.0,
            };
            for i in 0..rows {
                let r = apply_slice(out.row_mut(i), cfg, rng)?;
                acc.epsilon += r.epsilon;
                acc.p_raw += r.p_raw;
                acc.fraction += r.fraction;
                acc.n_modified += r.n_modified;
                acc.q_upper += r.q_upper;
                acc.min_act += r.min_act;
            }
            let nr = rows as f64;
            acc.epsilon /= nr;
            acc.p_raw /= nr;
            acc.fraction /= nr;
            acc.q_upper /= nr;
            acc.min_act /= nr;
            acc
        }
    };
    out.ensure_finite("arm_apply")?;
    Ok((out, report))
}

// ── hook adapter ────────────────────────────────────────────────────────────

/// [`ActivationHook`] wrapper: owns the RNG stream, applies the
/// redistribution on every call, and collects one report per application.
pub struct ArmHook<T: Scalar> {
    cfg: ArmConfig,
    rng: RngStream,
    reports: Vec<ArmReport>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> ArmHook<T> {
    /// Build from a config; the RNG stream starts at `cfg.seed`.
    pub fn new(cfg: ArmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ArmHook {
            rng: RngStream::new(cfg.seed),
            cfg,
            reports: Vec::new(),
            _marker: std::marker::PhantomData,
        })
    }

    pub fn config(&self) -> &ArmConfig {
        &self.cfg
    }

    /// Reports collected so far, one per application in call order.
    pub fn reports(&self) -> &[ArmReport] {
        &self.reports
    }

    pub fn into_reports(self) -> Vec<ArmReport> {
        self.reports
    }
}

impl<T: Scalar> ActivationHook<T> for ArmHook<T> {
    fn transform(&mut self, acts: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, report) = apply(acts, &self.cfg, &mut self.rng)?;
        self.reports.push(report);
        Ok(out)
    }
}
