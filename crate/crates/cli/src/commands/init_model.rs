//! `init-model`: materialize seeded weights as a container on disk.

use anyhow::Result;
use serde::Serialize;

use armlab::transformer::init_weights;
use armlab::weights_io::save_weights;

use crate::config::ExperimentConfig;
use crate::output::Emitter;

#[derive(Serialize)]
struct InitSummary {
    init_seed: u64,
    n_layers: usize,
    d_model: usize,
    d_ff: usize,
    vocab_size: usize,
    manifest: String,
    blob: String,
}

pub fn run(cfg: &ExperimentConfig, emitter: &mut Emitter) -> Result<()> {
    let model_config = cfg.model.model_config();
    let seed = cfg.model.init_seed(cfg.seed);
    let weights = init_weights::<f32>(&model_config, seed)?;
    let manifest_path = emitter.path("model.json");
    let blob_path = emitter.path("model.bin");
    save_weights(&weights, &manifest_path, &blob_path)?;
    emitter.record("model.json");
    emitter.record("model.bin");
    emitter.write_json(
        "init_summary.json",
        &InitSummary {
            init_seed: seed,
            n_layers: cfg.model.n_layers,
            d_model: cfg.model.d_model,
            d_ff: cfg.model.d_ff,
            vocab_size: cfg.model.vocab_size,
            manifest: "model.json".to_string(),
            blob: "model.bin".to_string(),
        },
    )?;
    Ok(())
}
