//! Desk-scale testbed for studying how inserted low-information tokens and a
//! targeted activation hook reshape the internals of a small decoder-only
//! transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`stats`] / [`rng`]: deterministic numeric kernels —
//!   fixed-order reductions, order statistics, and a counter-based RNG;
//! - [`transformer`]: a minimal decoder-only model (RMSNorm, causal
//!   attention, gated MLP) with full forward traces and an MLP hook point;
//! - [`arm`]: the activation redistribution hook that pushes near-zero MLP
//!   activations outward;
//! - [`mless`]: token-insertion experiments and the per-head affine
//!   (`lambda * output + sigma`) emulation of their attention effect;
//! - [`analytics`]: attention profiles, histograms, sparsity/norm/Gini
//!   metrics, token classes, n-gram diversity;
//! - [`theory`]: 64-bit verifiers for the variance-propagation predictions
//!   (RMSNorm Jacobian, scaling/bias variance, Taylor moments);
//! - [`bench`]: wall-clock overhead comparison of the hook vs. the MLP.
//!
//! Everything is generic over the float width via [`Scalar`]; inference uses
//! [`Tensor32`], verification uses [`Tensor64`].

pub mod analytics;
pub mod arm;
pub mod bench;
pub mod error;
pub mod mless;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod theory;
pub mod transformer;
pub mod weights_io;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Activation, Tensor};

/// 32-bit tensor used for model inference.
pub type Tensor32 = Tensor<f32>;
/// 64-bit tensor used for the verification math.
pub type Tensor64 = Tensor<f64>;

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the worker-thread budget for kernels that support deterministic
/// parallelism (currently the matmul row partition). Results are
/// bit-identical for every value; this only trades wall-clock time.
/// `0` is treated as 1.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Current worker-thread budget.
pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}
