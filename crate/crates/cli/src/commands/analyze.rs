//! `analyze`: measurement instruments over one forward pass — activation
//! metrics, a before/after histogram, the attention profile, token-class
//! near-zero proportions, and an n-gram diversity probe over sampled
//! generations.

use anyhow::Result;
use serde::Serialize;

use armlab::analytics::{
    activation_metrics, column_mean_below_diag, histogram, mean_profiles,
    near_zero_proportion_by_class, ngram_diversity,
};
use armlab::scalar::Scalar;
use armlab::transformer::{decode, forward, HookScope};

use crate::config::ExperimentConfig;
use crate::output::{fmt_f64, Emitter};

use super::{make_hook, prompt_tokens, resolve_weights};

/// Exactly the four activation indicators plus the sparsity threshold and
/// its percentile.
#[derive(Serialize)]
struct MetricsReport {
    relative_sparsity: f64,
    l1: f64,
    l2: f64,
    gini: f64,
    tau: f64,
    q: f64,
}

#[derive(Serialize)]
struct DiversityReport {
    n: usize,
    sequences: usize,
    distinct_n: usize,
    total_n: usize,
    ratio: f64,
}

pub fn run(cfg: &ExperimentConfig, emitter: &mut Emitter) -> Result<()> {
    let weights = resolve_weights(cfg)?;
    let model_config = cfg.model.model_config();
    let (tokens, texts) = prompt_tokens(cfg)?;
    let hook = make_hook(cfg)?;
    let mut spec = hook.map(|(spec, _)| spec);
    let (_, trace) = forward(&tokens, &weights, &model_config, spec.as_mut())?;

    let traced_layer = if cfg.arm.enabled { cfg.arm.layer_index } else { 0 };
    let layer = &trace.layers[traced_layer];
    let before = &layer.mlp_pre_hook;
    let after = &layer.mlp_post_hook;
    let q = cfg.analysis.quantile;

    let (metrics, tau) = activation_metrics(before, after, q, cfg.analysis.n_bins)?;
    emitter.write_json(
        "metrics.json",
        &MetricsReport {
            relative_sparsity: metrics.relative_sparsity,
            l1: metrics.l1,
            l2: metrics.l2,
            gini: metrics.gini,
            tau,
            q,
        },
    )?;

    // Shared-range histogram so the before and after counts are comparable.
    let max_abs = before
        .data()
        .iter()
        .chain(after.data())
        .map(|v| v.abs().to_f64c())
        .fold(0.0f64, f64::max);
    let range = if max_abs > 0.0 {
        (-max_abs, max_abs)
    } else {
        (-0.5, 0.5)
    };
    let (edges, counts_before) = histogram(before, cfg.analysis.n_bins, Some(range))?;
    let (_, counts_after) = histogram(after, cfg.analysis.n_bins, Some(range))?;
    let hist_rows: Vec<Vec<String>> = (0..cfg.analysis.n_bins)
        .map(|b| {
            vec![
                fmt_f64(edges[b]),
                fmt_f64(edges[b + 1]),
                counts_before[b].to_string(),
                counts_after[b].to_string(),
            ]
        })
        .collect();
    emitter.write_csv(
        "histogram.csv",
        &["bin_lo", "bin_hi", "count_before", "count_after"],
        &hist_rows,
    )?;

    // Attention profile of the traced layer, averaged over heads.
    let head_profiles = layer
        .head_matrices
        .iter()
        .map(column_mean_below_diag)
        .collect::<armlab::error::Result<Vec<_>>>()?;
    let profile = mean_profiles(&head_profiles)?;
    let profile_rows: Vec<Vec<String>> = profile
        .scores
        .iter()
        .enumerate()
        .map(|(t, s)| vec![t.to_string(), fmt_f64(*s)])
        .collect();
    emitter.write_csv(
        "attention_profile.csv",
        &["t", "mean_below_diag"],
        &profile_rows,
    )?;

    // Per-class near-zero proportions on the first layer's gate activations.
    let proportions = near_zero_proportion_by_class(&trace, &texts, cfg.analysis.epsilon)?;
    let class_rows: Vec<Vec<String>> = proportions
        .iter()
        .map(|(class, p)| {
            let name = serde_json::to_value(class)
                .map(|v| v.as_str().unwrap_or_default().to_string())
                .unwrap_or_default();
            vec![name, fmt_f64(*p)]
        })
        .collect();
    emitter.write_csv(
        "class_proportions.csv",
        &["class", "near_zero_proportion"],
        &class_rows,
    )?;

    // Diversity probe: seeded sampled generations under the same pipeline.
    let mut sequences = Vec::with_capacity(cfg.analysis.diversity_samples);
    for i in 0..cfg.analysis.diversity_samples {
        let policy = cfg.decode.sample_policy(cfg.seed, i as u64);
        let hook = make_hook(cfg)?;
        let mut spec = hook.map(|(spec, _)| spec);
        let generated = decode(
            &tokens,
            &weights,
            &model_config,
            spec.as_mut(),
            &policy,
            cfg.decode.max_new,
            HookScope::EveryStep,
        )?;
        sequences.push(generated);
    }
    let score = ngram_diversity(&sequences, cfg.analysis.ngram)?;
    emitter.write_json(
        "diversity.json",
        &DiversityReport {
            n: cfg.analysis.ngram,
            sequences: sequences.len(),
            distinct_n: score.distinct_n,
            total_n: score.total_n,
            ratio: score.ratio,
        },
    )?;
    Ok(())
}
