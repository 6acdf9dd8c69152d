//! `bench-overhead`: hook cost relative to the MLP block at the configured
//! model size.
//!
//! Measured wall-clock values are inherently non-reproducible, so they are
//! time data in the same sense as the manifest timestamp: `--no-timestamp`
//! suppresses the three measured fields and sets `timings_suppressed`,
//! leaving a byte-stable report for reproducibility comparisons.

use anyhow::{bail, Result};
use serde::Serialize;

use armlab::bench::bench_overhead;

use crate::config::{ExperimentConfig, SUB_BENCH};
use crate::output::Emitter;

#[derive(Serialize)]
struct BenchReport {
    config_hash: String,
    d_model: usize,
    d_ff: usize,
    seq_len: usize,
    reps: usize,
    warmup: usize,
    arm_enabled: bool,
    timings_suppressed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    mlp_median_secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    arm_median_secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratio: Option<f64>,
}

pub fn run(
    cfg: &ExperimentConfig,
    emitter: &mut Emitter,
    config_hash: &str,
    no_timestamp: bool,
) -> Result<()> {
    if cfg.bench.reps < 30 {
        bail!(
            "[bench] reps must be at least 30 for a meaningful median, got {}",
            cfg.bench.reps
        );
    }
    let model_config = cfg.model.model_config();
    let arm_cfg = if cfg.arm.enabled {
        Some(cfg.arm.arm_config(cfg.seed)?)
    } else {
        None
    };
    let report = bench_overhead(
        &model_config,
        cfg.bench.seq_len,
        cfg.seed ^ SUB_BENCH,
        cfg.bench.reps,
        cfg.bench.warmup,
        arm_cfg.as_ref(),
    )?;
    let (mlp, arm, ratio) = if no_timestamp {
        (None, None, None)
    } else {
        (
            Some(report.mlp_median_secs),
            Some(report.arm_median_secs),
            Some(report.ratio),
        )
    };
    emitter.write_json(
        "bench.json",
        &BenchReport {
            config_hash: config_hash.to_string(),
            d_model: report.d_model,
            d_ff: report.d_ff,
            seq_len: report.seq_len,
            reps: report.reps,
            warmup: report.warmup,
            arm_enabled: cfg.arm.enabled,
            timings_suppressed: no_timestamp,
            mlp_median_secs: mlp,
            arm_median_secs: arm,
            ratio,
        },
    )?;
    Ok(())
}
