//! Overhead measurement: hook cost relative to the MLP block it rides on.
//!
//! The question answered here is "what does the redistribution hook add on
//! top of the work the layer already does?". Both sides are timed on the
//! same shapes: the full gated-MLP block on a `[seq_len, d_model]` input,
//! and one hook application on the `[seq_len, d_ff]` gate-activation tensor
//! that block produces. Medians over repeated runs (after warmup) keep
//! one-off scheduler noise out of the ratio.

use std::time::Instant;

use serde::Serialize;

use crate::arm::{self, ArmConfig};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::transformer::{init_weights, mlp_block, ModelConfig};

/// Timing summary for one model size.
#[derive(Debug, Clone, Serialize)]
pub struct OverheadReport {
    pub d_model: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    /// Timed repetitions per side (excludes warmup).
    pub reps: usize,
    pub warmup: usize,
    pub mlp_median_secs: f64,
    /// `0` when the hook is disabled.
    pub arm_median_secs: f64,
    /// `arm_median_secs / mlp_median_secs`; `0` when the hook is disabled.
    pub ratio: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time the layer-0 MLP block against one hook application on its gate
/// activations, both in `f32`.
///
/// The input is a seeded uniform `[seq_len, d_model]` tensor, so every
/// repetition (and every rerun with the same arguments) performs identical
/// arithmetic. Pass `arm_cfg: None` to measure a disabled hook: the hook
/// side is then reported as exactly zero time and zero ratio.
pub fn bench_overhead(
    config: &ModelConfig,
    seq_len: usize,
    seed: u64,
    reps: usize,
    warmup: usize,
    arm_cfg: Option<&ArmConfig>,
) -> Result<OverheadReport> {
    config.validate()?;
    if seq_len == 0 {
        return Err(Error::invalid("bench", "seq_len must be positive"));
    }
    if reps == 0 {
        return Err(Error::invalid("bench", "reps must be positive"));
    }
    if let Some(cfg) = arm_cfg {
        cfg.validate()?;
    }

    let weights = init_weights::<f32>(config, seed)?;
    let layer = &weights.layers[0];

    // Deterministic stand-in for a normalized hidden state. The block's cost
    // does not depend on the values, only the shapes, so uniform entries are
    // as good as a real forward trace and much cheaper to produce.
    let mut rng = RngStream::new(seed ^ 0x00b5_0c4a);
    let n = seq_len * config.d_model;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(rng.uniform(-1.0f32, 1.0f32)?);
    }
    let x = Tensor::new(vec![seq_len, config.d_model], data)?;

    let mut mlp_times = Vec::with_capacity(reps);
    let mut acts: Option<Tensor<f32>> = None;
    for i in 0..warmup + reps {
        let t0 = Instant::now();
        let out = mlp_block(&x, layer, config, None)?;
        let dt = t0.elapsed().as_secs_f64();
        if i >= warmup {
            mlp_times.push(dt);
        }
        acts = Some(std::hint::black_box(out).pre_hook);
    }
    let acts = acts.expect("at least one repetition ran");
    let mlp_median_secs = median(mlp_times);

    let (arm_median_secs, ratio) = match arm_cfg {
        None => (0.0, 0.0),
        Some(cfg) => {
            let mut arm_times = Vec::with_capacity(reps);
            for i in 0..warmup + reps {
                // A fresh stream per repetition keeps the drawn values — and
                // therefore the work — identical across repetitions.
                let mut arm_rng = RngStream::new(cfg.seed);
                let t0 = Instant::now();
                let out = arm::apply(&acts, cfg, &mut arm_rng)?;
                let dt = t0.elapsed().as_secs_f64();
                if i >= warmup {
                    arm_times.push(dt);
                }
                std::hint::black_box(&out);
            }
            let arm_median = median(arm_times);
            if mlp_median_secs <= 0.0 {
                return Err(Error::invalid(
                    "bench",
                    "mlp median time was zero; clock resolution too coarse for this size",
                ));
            }
            (arm_median, arm_median / mlp_median_secs)
        }
    };

    Ok(OverheadReport {
        d_model: config.d_model,
        d_ff: config.d_ff,
        seq_len,
        reps,
        warmup,
        mlp_median_secs,
        arm_median_secs,
        ratio,
    })
}
