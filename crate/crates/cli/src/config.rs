//! Experiment configuration: a TOML file with explicit sections, one
//! top-level seed, and hard errors on unknown keys.
//!
//! All randomness in a run flows from the single top-level `seed`. Each
//! consumer derives its own stream by XOR-ing the seed with a fixed
//! per-purpose constant (the ASCII bytes of the purpose name, so a hex dump
//! reads as the purpose), which keeps the streams independent while leaving
//! every byte of every artifact a pure function of the config file plus
//! flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use armlab::arm::{ArmConfig, ArmScope, FractionMode};
use armlab::mless::{InsertPosition, InsertionSpec};
use armlab::tensor::Activation;
use armlab::transformer::{DecodePolicy, HookScope, ModelConfig};

// ── sub-stream derivation constants ─────────────────────────────────────────
// Stream seed = top-level seed XOR constant. The constants are the ASCII
// bytes of the purpose name (big-endian), so they are distinct, stable, and
// self-describing.

/// Weight initialization when `[model].weights_seed` is not given.
pub const SUB_WEIGHTS: u64 = u64::from_be_bytes(*b"WEIGHTS\0");
/// The redistribution hook's draw stream.
pub const SUB_ARM: u64 = u64::from_be_bytes(*b"ARM\0\0\0\0\0");
/// Nucleus-sampling decode stream.
pub const SUB_DECODE: u64 = u64::from_be_bytes(*b"DECODE\0\0");
/// Random insertion-boundary draws.
pub const SUB_INSERT: u64 = u64::from_be_bytes(*b"INSERT\0\0");
/// Benchmark input tensor.
pub const SUB_BENCH: u64 = u64::from_be_bytes(*b"BENCH\0\0\0");
/// Seeds of the numeric verification experiments.
pub const SUB_THEORY: u64 = u64::from_be_bytes(*b"THEORY\0\0");

/// Additional decode sample `i` (diversity probes) advances the decode seed
/// by `i` golden-ratio steps so samples are mutually independent.
pub fn decode_sample_seed(master: u64, sample: u64) -> u64 {
    (master ^ SUB_DECODE).wrapping_add(sample.wrapping_mul(armlab::rng::GAMMA))
}

// ── config schema ───────────────────────────────────────────────────────────

/// Full experiment description, loaded from one TOML file. Unknown keys
/// anywhere are a hard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Directory receiving every artifact (created if missing).
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub arm: ArmSection,
    /// Input tokens; required by commands that run the model.
    pub prompt: Option<PromptSection>,
    /// Filler-insertion experiment; required by `mless`.
    pub insertion: Option<InsertionSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub bench: BenchSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("armlab-out")
}

/// Model shape plus the weight source: a dedicated init seed, a container
/// file, or (when neither is given) a stream derived from the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub activation: Activation,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
    /// Explicit weight-init seed (overrides the derived default).
    pub weights_seed: Option<u64>,
    /// Weight container manifest path; the blob is the same path with a
    /// `bin` extension. Takes precedence over any seed.
    pub weights_file: Option<PathBuf>,
}

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_max_seq() -> usize {
    512
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            vocab_size: self.vocab_size,
            activation: self.activation,
            norm_eps: self.norm_eps,
            max_seq: self.max_seq,
        }
    }

    /// Init seed used when no weight file is configured.
    pub fn init_seed(&self, master: u64) -> u64 {
        self.weights_seed.unwrap_or(master ^ SUB_WEIGHTS)
    }
}

/// Redistribution hook settings. Field defaults mirror the library's
/// [`ArmConfig::default`]; the draw seed always derives from the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSection {
    #[serde(default)]
    pub enabled: bool,
    /// Layer whose gate activations the hook transforms.
    #[serde(default)]
    pub layer_index: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_p_min")]
    pub p_min: f64,
    #[serde(default = "default_p_max")]
    pub p_max: f64,
    #[serde(default = "default_p1")]
    pub p1: f64,
    /// `"mad"` (threshold-derived fraction) or `"direct_p"` (fixed fraction
    /// from `direct_p`).
    #[serde(default = "default_mode")]
    pub mode: String,
    pub direct_p: Option<f64>,
    /// `"full_tensor"` or `"per_token"`.
    #[serde(default = "default_scope")]
    pub scope: String,
}

fn default_c() -> f64 {
    ArmConfig::default().c
}

fn default_kappa() -> f64 {
    ArmConfig::default().kappa
}

fn default_p_min() -> f64 {
    ArmConfig::default().p_min
}

fn default_p_max() -> f64 {
    ArmConfig::default().p_max
}

fn default_p1() -> f64 {
    ArmConfig::default().p1
}

fn default_mode() -> String {
    "mad".to_string()
}

fn default_scope() -> String {
    "full_tensor".to_string()
}

impl Default for ArmSection {
    fn default() -> Self {
        ArmSection {
            enabled: false,
            layer_index: 0,
            c: default_c(),
            kappa: default_kappa(),
            p_min: default_p_min(),
            p_max: default_p_max(),
            p1: default_p1(),
            mode: default_mode(),
            direct_p: None,
            scope: default_scope(),
        }
    }
}

impl ArmSection {
    pub fn arm_config(&self, master: u64) -> Result<ArmConfig> {
        let mode = match self.mode.as_str() {
            "mad" => FractionMode::MadThreshold,
            "direct_p" => FractionMode::DirectP(
                self.direct_p
                    .context("[arm] mode = \"direct_p\" requires a direct_p value")?,
            ),
            other => bail!("[arm] mode must be \"mad\" or \"direct_p\", got \"{other}\""),
        };
        let scope = match self.scope.as_str() {
            "full_tensor" => ArmScope::FullTensor,
            "per_token" => ArmScope::PerToken,
            other => bail!("[arm] scope must be \"full_tensor\" or \"per_token\", got \"{other}\""),
        };
        let cfg = ArmConfig {
            c: self.c,
            kappa: self.kappa,
            p_min: self.p_min,
            p_max: self.p_max,
            p1: self.p1,
            mode,
            scope,
            seed: master ^ SUB_ARM,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Prompt as explicit token ids or as text split by the toy tokenizer.
/// Exactly one of the two must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub ids: Option<Vec<u32>>,
    pub text: Option<String>,
}

/// Filler-insertion experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsertionSection {
    pub token_id: u32,
    pub count: usize,
    /// `"begin"`, `"end"`, `"between"` (needs `boundary`), or `"random"`.
    pub position: String,
    pub boundary: Option<usize>,
    /// Filler-run lengths for the sweep outputs.
    #[serde(default = "default_sweep_counts")]
    pub sweep_counts: Vec<usize>,
    /// Layer / head at which the affine comparison runs.
    #[serde(default)]
    pub layer: usize,
    #[serde(default)]
    pub head: usize,
}

fn default_sweep_counts() -> Vec<usize> {
    vec![0, 1, 8, 64]
}

impl InsertionSection {
    pub fn insertion_spec(&self, master: u64) -> Result<InsertionSpec> {
        let position = match self.position.as_str() {
            "begin" => InsertPosition::Begin,
            "end" => InsertPosition::End,
            "between" => InsertPosition::Between {
                boundary: self
                    .boundary
                    .context("[insertion] position = \"between\" requires a boundary index")?,
            },
            "random" => InsertPosition::Random {
                seed: master ^ SUB_INSERT,
            },
            other => bail!(
                "[insertion] position must be one of \"begin\", \"end\", \"between\", \
                 \"random\"; got \"{other}\""
            ),
        };
        Ok(InsertionSpec {
            token_id: self.token_id,
            count: self.count,
            position,
        })
    }
}

/// Analysis instrument settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Histogram bins (also feeds the Gini computation).
    pub n_bins: usize,
    /// Baseline magnitude percentile for relative sparsity, in (0, 100].
    pub quantile: f64,
    /// Near-zero threshold for the token-class proportions.
    pub epsilon: f64,
    /// N-gram order of the diversity score.
    pub ngram: usize,
    /// Sampled generations feeding the diversity score.
    pub diversity_samples: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            n_bins: 32,
            quantile: 50.0,
            epsilon: 0.01,
            ngram: 2,
            diversity_samples: 4,
        }
    }
}

/// Generation settings for `decode` (and the diversity probes).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub max_new: usize,
    /// `"greedy"` or `"sample"`.
    pub policy: String,
    pub temperature: f64,
    pub top_p: f64,
    /// `"every_step"` or `"prompt_only"`.
    pub hook_scope: String,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            max_new: 16,
            policy: "greedy".to_string(),
            temperature: 0.8,
            top_p: 0.9,
            hook_scope: "every_step".to_string(),
        }
    }
}

impl DecodeSection {
    pub fn policy(&self, master: u64) -> Result<DecodePolicy> {
        match self.policy.as_str() {
            "greedy" => Ok(DecodePolicy::Greedy),
            "sample" => Ok(DecodePolicy::Sample {
                temperature: self.temperature,
                top_p: self.top_p,
                seed: master ^ SUB_DECODE,
            }),
            other => bail!("[decode] policy must be \"greedy\" or \"sample\", got \"{other}\""),
        }
    }

    /// Policy for diversity sample `i`: always nucleus sampling, seeded per
    /// sample (see [`decode_sample_seed`]).
    pub fn sample_policy(&self, master: u64, sample: u64) -> DecodePolicy {
        DecodePolicy::Sample {
            temperature: self.temperature,
            top_p: self.top_p,
            seed: decode_sample_seed(master, sample),
        }
    }

    pub fn scope(&self) -> Result<HookScope> {
        match self.hook_scope.as_str() {
            "every_step" => Ok(HookScope::EveryStep),
            "prompt_only" => Ok(HookScope::PromptOnly),
            other => bail!(
                "[decode] hook_scope must be \"every_step\" or \"prompt_only\", got \"{other}\""
            ),
        }
    }
}

/// Overhead benchmark settings. Medians need a real sample: the command
/// insists on at least 30 repetitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub seq_len: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            seq_len: 64,
            reps: 30,
            warmup: 3,
        }
    }
}

// ── presets ─────────────────────────────────────────────────────────────────

/// Named hook-parameter bundles selectable with `--preset`.
pub const PRESETS: &[&str] = &["mathlike-small", "direct-p"];

/// Overwrite the `[arm]` tuning fields with a named preset. The `enabled`
/// and `layer_index` fields are left as configured.
pub fn apply_preset(cfg: &mut ExperimentConfig, name: &str) -> Result<()> {
    match name {
        "mathlike-small" => {
            cfg.arm.c = 0.13;
            cfg.arm.p1 = 99.5;
            cfg.arm.mode = "mad".to_string();
            cfg.arm.direct_p = None;
        }
        "direct-p" => {
            cfg.arm.mode = "direct_p".to_string();
            cfg.arm.direct_p = Some(0.25);
            cfg.arm.p1 = 85.0;
        }
        other => bail!("unknown preset \"{other}\" (available: {})", PRESETS.join(", ")),
    }
    Ok(())
}

// ── loading, overrides, validation, hashing ─────────────────────────────────

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg)
}

/// Fold command-line overrides into the loaded config, in a fixed order:
/// preset first, then seed and output directory.
pub fn apply_overrides(
    cfg: &mut ExperimentConfig,
    preset: Option<&str>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    if let Some(name) = preset {
        apply_preset(cfg, name)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = out {
        cfg.output_dir = dir.to_path_buf();
    }
    Ok(())
}

impl ExperimentConfig {
    /// Structural validation of every section (model shape, hook parameters,
    /// prompt well-formedness, analysis domains). Runs after overrides so
    /// errors reflect the effective config.
    pub fn validate(&self) -> Result<()> {
        self.model.model_config().validate()?;
        if let Some(file) = &self.model.weights_file {
            if !file.exists() {
                bail!("[model] weights_file {} does not exist", file.display());
            }
        }
        self.arm.arm_config(self.seed)?;
        if self.arm.enabled && self.arm.layer_index >= self.model.n_layers {
            bail!(
                "[arm] layer_index {} out of range ({} layers)",
                self.arm.layer_index,
                self.model.n_layers
            );
        }
        if let Some(prompt) = &self.prompt {
            match (&prompt.ids, &prompt.text) {
                (Some(_), Some(_)) => bail!("[prompt] set either ids or text, not both"),
                (None, None) => bail!("[prompt] needs ids or text"),
                (Some(ids), None) if ids.is_empty() => bail!("[prompt] ids must be non-empty"),
                (None, Some(text)) if text.trim().is_empty() => {
                    bail!("[prompt] text must be non-empty")
                }
                _ => {}
            }
        }
        if let Some(ins) = &self.insertion {
            ins.insertion_spec(self.seed)?;
            if ins.layer >= self.model.n_layers {
                bail!(
                    "[insertion] layer {} out of range ({} layers)",
                    ins.layer,
                    self.model.n_layers
                );
            }
            if ins.head >= self.model.n_heads {
                bail!(
                    "[insertion] head {} out of range ({} heads)",
                    ins.head,
                    self.model.n_heads
                );
            }
        }
        if self.analysis.n_bins == 0 {
            bail!("[analysis] n_bins must be positive");
        }
        if !(self.analysis.quantile > 0.0 && self.analysis.quantile <= 100.0) {
            bail!("[analysis] quantile must be in (0, 100]");
        }
        if !self.analysis.epsilon.is_finite() || self.analysis.epsilon < 0.0 {
            bail!("[analysis] epsilon must be finite and >= 0");
        }
        if self.analysis.ngram == 0 {
            bail!("[analysis] ngram must be at least 1");
        }
        self.decode.policy(self.seed)?;
        self.decode.scope()?;
        if self.decode.max_new == 0 {
            bail!("[decode] max_new must be positive");
        }
        if self.bench.seq_len == 0 || self.bench.seq_len > self.model.max_seq {
            bail!(
                "[bench] seq_len must be in 1..={} (model max_seq)",
                self.model.max_seq
            );
        }
        Ok(())
    }
}

/// SHA-256 (hex) of the effective config, serialized as canonical
/// sorted-key JSON. Two runs hash alike exactly when every effective
/// setting matches, regardless of TOML formatting. The output directory
/// is excluded: where results land is not part of what was run.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut value = serde_json::to_value(cfg).context("serializing config for hashing")?;
    if let Some(map) = value.as_object_mut() {
        map.remove("output_dir");
    }
    let canonical = serde_json::to_string(&value).context("canonicalizing config")?;
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}
