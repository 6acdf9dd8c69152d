//! One module per subcommand, plus the plumbing they share: weight-source
//! resolution, prompt materialization, and hook wiring.

pub mod analyze;
pub mod bench;
pub mod decode;
pub mod forward;
pub mod init_model;
pub mod mless;
pub mod verify_theory;

use std::cell::RefCell;
use std::rc::Rc;

use anyhow::{bail, Context, Result};

use armlab::analytics::ToyTokenizer;
use armlab::arm::ArmHook;
use armlab::error::Result as CoreResult;
use armlab::tensor::Tensor;
use armlab::transformer::{init_weights, ActivationHook, HookSpec, ModelWeights};
use armlab::weights_io::load_weights;

use crate::config::ExperimentConfig;
use crate::output::{fmt_f64, Emitter};

/// Materialize the model weights from the configured source: a container
/// file when given, otherwise seeded initialization.
pub fn resolve_weights(cfg: &ExperimentConfig) -> Result<ModelWeights<f32>> {
    let model_config = cfg.model.model_config();
    match &cfg.model.weights_file {
        Some(manifest) => {
            let blob = manifest.with_extension("bin");
            load_weights(&model_config, manifest, &blob).with_context(|| {
                format!(
                    "loading weights from {} / {}",
                    manifest.display(),
                    blob.display()
                )
            })
        }
        None => Ok(init_weights(
            &model_config,
            cfg.model.init_seed(cfg.seed),
        )?),
    }
}

/// Prompt tokens plus per-token display texts. Text prompts go through the
/// toy tokenizer; id prompts use the decimal id as display text.
pub fn prompt_tokens(cfg: &ExperimentConfig) -> Result<(Vec<u32>, Vec<String>)> {
    let prompt = cfg
        .prompt
        .as_ref()
        .context("this command needs a [prompt] section")?;
    let (ids, texts) = match (&prompt.ids, &prompt.text) {
        (Some(ids), None) => {
            let texts = ids.iter().map(|id| id.to_string()).collect();
            (ids.clone(), texts)
        }
        (None, Some(text)) => {
            let mut tok = ToyTokenizer::new();
            let ids = tok.encode(text);
            let texts = tok.decode(&ids)?;
            (ids, texts)
        }
        _ => bail!("[prompt] needs exactly one of ids or text"),
    };
    if ids.is_empty() {
        bail!("[prompt] produced no tokens");
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.model.vocab_size) {
        bail!(
            "[prompt] token id {bad} out of range for vocab_size {}",
            cfg.model.vocab_size
        );
    }
    Ok((ids, texts))
}

/// Hook adapter that leaves the underlying collector reachable after the
/// forward pass hands the boxed hook back.
pub struct SharedArmHook(pub Rc<RefCell<ArmHook<f32>>>);

impl ActivationHook<f32> for SharedArmHook {
    fn transform(&mut self, acts: &Tensor<f32>) -> CoreResult<Tensor<f32>> {
        self.0.borrow_mut().transform(acts)
    }
}

/// Build the configured hook: the `HookSpec` to pass into the forward, plus
/// the shared collector to read reports from afterwards. `None` when disabled.
#[allow(clippy::type_complexity)]
pub fn make_hook(
    cfg: &ExperimentConfig,
) -> Result<Option<(HookSpec<f32>, Rc<RefCell<ArmHook<f32>>>)>> {
    if !cfg.arm.enabled {
        return Ok(None);
    }
    let arm_cfg = cfg.arm.arm_config(cfg.seed)?;
    let collector = Rc::new(RefCell::new(ArmHook::new(arm_cfg)?));
    let spec = HookSpec::new(
        cfg.arm.layer_index,
        Box::new(SharedArmHook(collector.clone())),
    );
    Ok(Some((spec, collector)))
}

/// Write a `[S, C]` tensor as CSV: a position column `t` followed by one
/// column per channel.
pub fn write_tensor_csv(
    emitter: &mut Emitter,
    name: &str,
    tensor: &Tensor<f32>,
    col_prefix: &str,
) -> Result<()> {
    let dims = tensor.shape();
    if dims.len() != 2 {
        bail!("csv {name}: expected a 2-d tensor, got shape {dims:?}");
    }
    let (s, c) = (dims[0], dims[1]);
    let mut header: Vec<String> = Vec::with_capacity(c + 1);
    header.push("t".to_string());
    for j in 0..c {
        header.push(format!("{col_prefix}{j}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..s)
        .map(|t| {
            let mut row = Vec::with_capacity(c + 1);
            row.push(t.to_string());
            for &v in tensor.row(t) {
                row.push(fmt_f64(f64::from(v)));
            }
            row
        })
        .collect();
    emitter.write_csv(name, &header_refs, &rows)
}
