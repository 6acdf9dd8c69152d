//! `decode`: seeded generation from the prompt, hook attached per config.

use anyhow::Result;
use serde::Serialize;

use armlab::transformer::decode;

use crate::config::ExperimentConfig;
use crate::output::Emitter;

use super::{make_hook, prompt_tokens, resolve_weights};

#[derive(Serialize)]
struct DecodeReport {
    prompt: Vec<u32>,
    generated: Vec<u32>,
    policy: String,
    max_new: usize,
    arm_enabled: bool,
}

pub fn run(cfg: &ExperimentConfig, emitter: &mut Emitter) -> Result<()> {
    let weights = resolve_weights(cfg)?;
    let model_config = cfg.model.model_config();
    let (tokens, _) = prompt_tokens(cfg)?;
    let policy = cfg.decode.policy(cfg.seed)?;
    let scope = cfg.decode.scope()?;
    let hook = make_hook(cfg)?;
    let (mut spec, collector) = match hook {
        Some((spec, collector)) => (Some(spec), Some(collector)),
        None => (None, None),
    };
    let full = decode(
        &tokens,
        &weights,
        &model_config,
        spec.as_mut(),
        &policy,
        cfg.decode.max_new,
        scope,
    )?;
    if let Some(collector) = collector {
        emitter.write_json("arm_report.json", &collector.borrow().reports())?;
    }
    emitter.write_json(
        "generated.json",
        &DecodeReport {
            generated: full[tokens.len()..].to_vec(),
            prompt: tokens,
            policy: cfg.decode.policy.clone(),
            max_new: cfg.decode.max_new,
            arm_enabled: cfg.arm.enabled,
        },
    )?;
    Ok(())
}
