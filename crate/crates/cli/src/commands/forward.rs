//! `forward`: one traced pass over the prompt, with the hook as configured.

use anyhow::Result;
use serde::Serialize;

use armlab::transformer::forward;

use crate::config::ExperimentConfig;
use crate::output::Emitter;

use super::{make_hook, prompt_tokens, resolve_weights, write_tensor_csv};

#[derive(Serialize)]
struct ForwardSummary {
    n_tokens: usize,
    vocab_size: usize,
    arm_enabled: bool,
    /// Layer whose gate activations the emitted CSVs show.
    traced_layer: usize,
}

pub fn run(cfg: &ExperimentConfig, emitter: &mut Emitter) -> Result<()> {
    let weights = resolve_weights(cfg)?;
    let model_config = cfg.model.model_config();
    let (tokens, _) = prompt_tokens(cfg)?;
    let hook = make_hook(cfg)?;
    let (mut spec, collector) = match hook {
        Some((spec, collector)) => (Some(spec), Some(collector)),
        None => (None, None),
    };
    let (logits, trace) = forward(&tokens, &weights, &model_config, spec.as_mut())?;

    let traced_layer = if cfg.arm.enabled { cfg.arm.layer_index } else { 0 };
    write_tensor_csv(emitter, "logits.csv", &logits, "v")?;
    write_tensor_csv(
        emitter,
        "activations_pre.csv",
        &trace.layers[traced_layer].mlp_pre_hook,
        "c",
    )?;
    write_tensor_csv(
        emitter,
        "activations_post.csv",
        &trace.layers[traced_layer].mlp_post_hook,
        "c",
    )?;
    if let Some(collector) = collector {
        emitter.write_json("arm_report.json", &collector.borrow().reports())?;
    }
    emitter.write_json(
        "forward_summary.json",
        &ForwardSummary {
            n_tokens: tokens.len(),
            vocab_size: cfg.model.vocab_size,
            arm_enabled: cfg.arm.enabled,
            traced_layer,
        },
    )?;
    Ok(())
}
