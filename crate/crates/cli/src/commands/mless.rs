//! `mless`: filler-insertion emulation — affine-model residuals at the
//! configured position, plus a filler-length sweep with per-length
//! sigma-coherence.

use anyhow::{Context, Result};
use serde::Serialize;

use armlab::mless::{emulate_vs_actual, sweep_lengths, InsertionSpec};

use crate::config::ExperimentConfig;
use crate::output::{fmt_f64, Emitter};

use super::{prompt_tokens, resolve_weights};

#[derive(Serialize)]
struct MlessSummary {
    token_id: u32,
    count: usize,
    layer: usize,
    head: usize,
    lambda_mean: f64,
    lambda_min: f64,
    lambda_max: f64,
    mean_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_coherence: Option<f64>,
    /// Whether `lambda_mean` is non-increasing across the sweep in
    /// ascending filler-count order.
    sweep_lambda_nonincreasing: bool,
}

pub fn run(cfg: &ExperimentConfig, emitter: &mut Emitter) -> Result<()> {
    let insertion = cfg
        .insertion
        .as_ref()
        .context("mless needs an [insertion] section")?;
    let spec = insertion.insertion_spec(cfg.seed)?;
    let weights = resolve_weights(cfg)?;
    let model_config = cfg.model.model_config();
    let (tokens, _) = prompt_tokens(cfg)?;

    // The configured single emulation, at the configured layer and head.
    let result = emulate_vs_actual(
        &tokens,
        &spec,
        &weights,
        &model_config,
        insertion.layer,
        insertion.head,
    )?;
    let residual_rows: Vec<Vec<String>> = result
        .per_token_residual
        .iter()
        .enumerate()
        .map(|(t, r)| vec![t.to_string(), fmt_f64(*r)])
        .collect();
    emitter.write_csv("residuals.csv", &["t", "residual"], &residual_rows)?;

    // Filler-length sweep at the front boundary, layer 0 / head 0.
    let sweep = sweep_lengths(
        &tokens,
        insertion.token_id,
        &insertion.sweep_counts,
        &weights,
        &model_config,
    )?;
    let sweep_rows: Vec<Vec<String>> = sweep
        .iter()
        .map(|row| {
            vec![
                row.k.to_string(),
                fmt_f64(row.lambda_mean),
                fmt_f64(row.sigma_l2_mean),
                fmt_f64(row.residual_mean),
            ]
        })
        .collect();
    emitter.write_csv(
        "sweep.csv",
        &["k", "lambda_mean", "sigma_l2_mean", "residual_mean"],
        &sweep_rows,
    )?;

    // Sigma coherence per sweep length (empty cell when fewer than two
    // sigma vectors have usable norm).
    let mut coherence_rows = Vec::with_capacity(insertion.sweep_counts.len());
    for &k in &insertion.sweep_counts {
        let probe = InsertionSpec {
            token_id: insertion.token_id,
            count: k,
            position: armlab::mless::InsertPosition::Begin,
        };
        let res = emulate_vs_actual(&tokens, &probe, &weights, &model_config, 0, 0)?;
        coherence_rows.push(vec![
            k.to_string(),
            res.sigma_coherence.map(fmt_f64).unwrap_or_default(),
        ]);
    }
    emitter.write_csv("coherence.csv", &["k", "sigma_coherence"], &coherence_rows)?;

    // Monotone-lambda check over the sweep, evaluated in ascending-k order.
    let mut by_k: Vec<_> = sweep.iter().collect();
    by_k.sort_by_key(|row| row.k);
    let nonincreasing = by_k
        .windows(2)
        .all(|w| w[1].lambda_mean <= w[0].lambda_mean + 1e-12);

    emitter.write_json(
        "emulation.json",
        &MlessSummary {
            token_id: insertion.token_id,
            count: insertion.count,
            layer: insertion.layer,
            head: insertion.head,
            lambda_mean: result.lambda_mean,
            lambda_min: result.lambda_min,
            lambda_max: result.lambda_max,
            mean_residual: result.mean_residual,
            sigma_coherence: result.sigma_coherence,
            sweep_lambda_nonincreasing: nonincreasing,
        },
    )?;
    Ok(())
}
