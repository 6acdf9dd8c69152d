//! Filler-token insertion emulator.
//!
//! Inserting runs of a contentless filler token into a prompt reshapes each
//! original token's attention row: some mass moves onto the fillers, and the
//! head output picks up their value vectors. For original token `t` this is
//! an affine map of the baseline head output,
//!
//! ```text
//! out'[t] = lambda_t * out[t] + sigma_t
//! ```
//!
//! where `lambda_t` is the attention mass `t` still spends on original
//! tokens and `sigma_t` is the filler-weighted sum of filler value vectors.
//! In the first layer of a model without positional encodings this identity
//! is exact at head level (aligned positions see identical inputs), which
//! makes it a sharp oracle; deeper layers only approximate it.
//!
//! The module builds insertion scenarios, extracts `(lambda, sigma)` from
//! traces, and quantifies how well the affine model predicts the actual
//! post-insertion outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::{forward, ForwardTrace, ModelConfig, ModelWeights};

/// Where the filler run goes, as a boundary index in the original sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InsertPosition {
    /// Before the first token.
    Begin,
    /// At boundary `boundary` (0 ..= len): before the token currently at
    /// that index.
    Between { boundary: usize },
    /// After the last token.
    End,
    /// A seeded uniform draw over all `len + 1` boundaries.
    Random { seed: u64 },
}

/// A run of `count` copies of one filler token at a chosen position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsertionSpec {
    pub token_id: u32,
    pub count: usize,
    pub position: InsertPosition,
}

/// Alignment between original and post-insertion positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    /// New position of each original token, in original order.
    pub orig_to_new: Vec<usize>,
    /// Positions holding inserted tokens, ascending.
    pub inserted: Vec<usize>,
}

impl IndexMap {
    pub fn identity(len: usize) -> Self {
        IndexMap {
            orig_to_new: (0..len).collect(),
            inserted: vec![],
        }
    }
}

/// Extracted per-token affine model.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<T: Scalar> {
    /// Retained-mass scale per original token, each in `(0, 1]`.
    pub lambda: Vec<f64>,
    /// Additive shift per original token, `[S_orig, d]` in whatever space
    /// the comparison runs in (`d_head` at head level).
    pub sigma: Tensor<T>,
}

impl<T: Scalar> AffineParams<T> {
    pub fn validate(&self) -> Result<()> {
        let (rows, _) = self.sigma.dims2("affine_params")?;
        if rows != self.lambda.len() {
            return Err(Error::shape(
                "affine_params",
                format!("{} lambdas vs {} sigma rows", self.lambda.len(), rows),
            ));
        }
        if !self
            .lambda
            .iter()
            .all(|l| l.is_finite() && *l > 0.0 && *l <= 1.0 + 1e-6)
        {
            return Err(Error::invalid(
                "affine_params",
                "every lambda must be finite and in (0, 1]",
            ));
        }
        Ok(())
    }
}

/// How well the affine model matches the actual post-insertion outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationResult {
    /// `‖actual_t − affine_t‖₂ / ‖actual_t‖₂` per original token (absolute
    /// 2-norm of the difference when the denominator is zero).
    pub per_token_residual: Vec<f64>,
    pub mean_residual: f64,
    pub lambda_mean: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Mean pairwise cosine of the sigma vectors with norm above 1e-12;
    /// `None` when fewer than two qualify.
    pub sigma_coherence: Option<f64>,
}

/// One row of a length sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub lambda_mean: f64,
    pub sigma_l2_mean: f64,
    pub residual_mean: f64,
}

// ── insertion ───────────────────────────────────────────────────────────────

/// Insert an arbitrary filler slice at boundary `at`, tracking alignment.
pub fn insert_sequence(
    tokens: &[u32],
    at: usize,
    filler: &[u32],
    max_len: usize,
) -> Result<(Vec<u32>, IndexMap)> {
    if at > tokens.len() {
        return Err(Error::invalid(
            "insert_sequence",
            format!("boundary {at} exceeds sequence length {}", tokens.len()),
        ));
    }
    let new_len = tokens.len() + filler.len();
    if new_len > max_len {
        return Err(Error::SequenceTooLong {
            len: new_len,
            max: max_len,
        });
    }
    let mut out = Vec::with_capacity(new_len);
    out.extend_from_slice(&tokens[..at]);
    out.extend_from_slice(filler);
    out.extend_from_slice(&tokens[at..]);
    let orig_to_new = (0..tokens.len())
        .map(|i| if i < at { i } else { i + filler.len() })
        .collect();
    let inserted = (at..at + filler.len()).collect();
    Ok((out, IndexMap { orig_to_new, inserted }))
}

/// Resolve a spec's position to a boundary index.
pub fn resolve_position(position: InsertPosition, len: usize) -> Result<usize> {
    Ok(match position {
        InsertPosition::Begin => 0,
        InsertPosition::Between { boundary } => boundary,
        InsertPosition::End => len,
        InsertPosition::Random { seed } => RngStream::new(seed).uniform_index(len + 1)?,
    })
}

/// Insert `spec.count` copies of `spec.token_id` at the spec's position.
pub fn insert_tokens(
    tokens: &[u32],
    spec: &InsertionSpec,
    max_len: usize,
) -> Result<(Vec<u32>, IndexMap)> {
    let at = resolve_position(spec.position, tokens.len())?;
    let filler = vec![spec.token_id; spec.count];
    insert_sequence(tokens, at, &filler, max_len)
}

// ── extraction ──────────────────────────────────────────────────────────────

fn head_matrix<'a, T: Scalar>(
    trace: &'a ForwardTrace<T>,
    layer: usize,
    head: usize,
    op: &'static str,
) -> Result<&'a Tensor<T>> {
    let lt = trace
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(op, format!("layer {layer} out of range")))?;
    lt.head_matrices
        .get(head)
        .ok_or_else(|| Error::invalid(op, format!("head {head} out of range")))
}

fn check_alignment<T: Scalar>(
    base_s: usize,
    ins_s: usize,
    map: &IndexMap,
    op: &'static str,
    _witness: &Tensor<T>,
) -> Result<()> {
    if map.orig_to_new.len() != base_s
        || map.orig_to_new.len() + map.inserted.len() != ins_s
        || map.orig_to_new.iter().chain(&map.inserted).any(|&p| p >= ins_s)
    {
        return Err(Error::shape(
            op,
            format!(
                "index map ({} original, {} inserted) does not align S={base_s} with S'={ins_s}",
                map.orig_to_new.len(),
                map.inserted.len()
            ),
        ));
    }
    Ok(())
}

/// Retained-mass ratio per original token: post-insertion attention mass
/// from `t` onto original tokens, divided by the baseline mass onto the
/// same tokens (1 by row-stochasticity).
pub fn extract_lambda<T: Scalar>(
    trace_base: &ForwardTrace<T>,
    trace_ins: &ForwardTrace<T>,
    map: &IndexMap,
    layer: usize,
    head: usize,
) -> Result<Vec<f64>> {
    let w_base = head_matrix(trace_base, layer, head, "extract_lambda")?;
    let w_ins = head_matrix(trace_ins, layer, head, "extract_lambda")?;
    let (sb, sb2) = w_base.dims2("extract_lambda")?;
    let (si, si2) = w_ins.dims2("extract_lambda")?;
    if sb != sb2 || si != si2 {
        return Err(Error::shape("extract_lambda", "attention matrices must be square"));
    }
    check_alignment(sb, si, map, "extract_lambda", w_base)?;
    let mut lambda = Vec::with_capacity(sb);
    for t in 0..sb {
        let row_ins = w_ins.row(map.orig_to_new[t]);
        let row_base = w_base.row(t);
        let mut retained = 0.0f64;
        let mut baseline = 0.0f64;
        for (j, &new_j) in map.orig_to_new.iter().enumerate() {
            retained += row_ins[new_j].to_f64c();
            baseline += row_base[j].to_f64c();
        }
        if baseline <= 0.0 {
            return Err(Error::invalid(
                "extract_lambda",
                format!("baseline attention mass for token {t} is not positive"),
            ));
        }
        lambda.push(retained / baseline);
    }
    Ok(lambda)
}

/// Additive shift per original token: the filler-weighted sum of filler
/// value vectors, `sigma_t = Σ_i W[new(t), i] · V[i]` over inserted
/// positions `i`. Returns `[S_orig, d_head]`.
pub fn compute_bias<T: Scalar>(
    trace_ins: &ForwardTrace<T>,
    map: &IndexMap,
    layer: usize,
    head: usize,
) -> Result<Tensor<T>> {
    let w_ins = head_matrix(trace_ins, layer, head, "compute_bias")?;
    let values = &trace_ins.layers[layer].head_values[head];
    let (si, si2) = w_ins.dims2("compute_bias")?;
    if si != si2 {
        return Err(Error::shape("compute_bias", "attention matrix must be square"));
    }
    let (vs, d_head) = values.dims2("compute_bias")?;
    if vs != si {
        return Err(Error::shape(
            "compute_bias",
            format!("{si} attention rows vs {vs} value rows"),
        ));
    }
    check_alignment(map.orig_to_new.len(), si, map, "compute_bias", w_ins)?;
    let s_orig = map.orig_to_new.len();
    let mut sigma = Tensor::zeros(vec![s_orig, d_head]);
    for t in 0..s_orig {
        let row = w_ins.row(map.orig_to_new[t]);
        for &i in &map.inserted {
            let w = row[i];
            let v = values.row(i);
            let dst = sigma.row_mut(t);
            for (d, vd) in dst.iter_mut().zip(v) {
                *d += w * *vd;
            }
        }
    }
    Ok(sigma)
}

/// Apply the affine model row-wise: `out[t] = lambda_t * x[t] + sigma_t`.
pub fn apply_affine<T: Scalar>(attn_out: &Tensor<T>, params: &AffineParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let (s, d) = attn_out.dims2("apply_affine")?;
    let (ss, sd) = params.sigma.dims2("apply_affine")?;
    if s != ss || d != sd {
        return Err(Error::shape(
            "apply_affine",
            format!("input [{s}, {d}] vs sigma [{ss}, {sd}]"),
        ));
    }
    let mut out = Tensor::zeros(vec![s, d]);
    for t in 0..s {
        let l = T::from_f64c(params.lambda[t]);
        let x = attn_out.row(t);
        let sg = params.sigma.row(t);
        let dst = out.row_mut(t);
        for j in 0..d {
            dst[j] = l * x[j] + sg[j];
        }
    }
    Ok(out)
}

fn row_norm_f64<T: Scalar>(row: &[T]) -> f64 {
    row.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>().sqrt()
}

fn sigma_coherence<T: Scalar>(sigma: &Tensor<T>) -> Result<Option<f64>> {
    let (s, d) = sigma.dims2("sigma_coherence")?;
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for t in 0..s {
        let row = sigma.row(t);
        let norm = row_norm_f64(row);
        if norm > 1e-12 {
            dirs.push(row.iter().map(|v| v.to_f64c() / norm).collect());
        }
    }
    if dirs.len() < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            total += (0..d).map(|k| dirs[i][k] * dirs[j][k]).sum::<f64>();
            pairs += 1;
        }
    }
    Ok(Some(total / pairs as f64))
}

fn summarize<T: Scalar>(
    base_out: &Tensor<T>,
    actual_rows: &[Vec<T>],
    params: &AffineParams<T>,
) -> Result<EmulationResult> {
    let affine = apply_affine(base_out, params)?;
    let (s, d) = affine.dims2("emulate_vs_actual")?;
    let mut per_token_residual = Vec::with_capacity(s);
    for (t, act) in actual_rows[..s].iter().enumerate() {
        let pred = affine.row(t);
        let diff: f64 = (0..d)
            .map(|j| (act[j].to_f64c() - pred[j].to_f64c()).powi(2))
            .sum::<f64>()
            .sqrt();
        let denom = row_norm_f64(act);
        per_token_residual.push(if denom > 0.0 { diff / denom } else { diff });
    }
    let mean_residual = per_token_residual.iter().sum::<f64>() / s as f64;
    let lambda_mean = params.lambda.iter().sum::<f64>() / s as f64;
    let lambda_min = params.lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda_max = params.lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(EmulationResult {
        per_token_residual,
        mean_residual,
        lambda_mean,
        lambda_min,
        lambda_max,
        sigma_coherence: sigma_coherence(&params.sigma)?,
    })
}

/// Run the base and inserted prompts, extract `(lambda, sigma)` at the given
/// layer and head, and compare the affine prediction against the actual
/// post-insertion head outputs at original-token positions.
pub fn emulate_sequence<T: Scalar>(
    tokens: &[u32],
    filler: &[u32],
    at: usize,
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    layer: usize,
    head: usize,
) -> Result<EmulationResult> {
    let (ins_tokens, map) = insert_sequence(tokens, at, filler, config.max_seq)?;
    let (_, trace_base) = forward(tokens, weights, config, None)?;
    let (_, trace_ins) = forward(&ins_tokens, weights, config, None)?;
    let lambda = extract_lambda(&trace_base, &trace_ins, &map, layer, head)?;
    let sigma = compute_bias(&trace_ins, &map, layer, head)?;
    let params = AffineParams { lambda, sigma };
    let base_out = &trace_base.layers[layer].head_outputs[head];
    let ins_out = &trace_ins.layers[layer].head_outputs[head];
    let actual: Vec<Vec<T>> = map
        .orig_to_new
        .iter()
        .map(|&p| ins_out.row(p).to_vec())
        .collect();
    summarize(base_out, &actual, &params)
}

/// [`emulate_sequence`] for a repeated-filler [`InsertionSpec`].
pub fn emulate_vs_actual<T: Scalar>(
    tokens: &[u32],
    spec: &InsertionSpec,
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    layer: usize,
    head: usize,
) -> Result<EmulationResult> {
    let at = resolve_position(spec.position, tokens.len())?;
    let filler = vec![spec.token_id; spec.count];
    emulate_sequence(tokens, &filler, at, weights, config, layer, head)
}

/// Sweep filler-run lengths at the front of the prompt, summarizing the
/// first layer's head 0 per length. Rows are emitted in `counts` order.
pub fn sweep_lengths<T: Scalar>(
    tokens: &[u32],
    filler_id: u32,
    counts: &[usize],
    weights: &ModelWeights<T>,
    config: &ModelConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(counts.len());
    for &k in counts {
        let spec = InsertionSpec {
            token_id: filler_id,
            count: k,
            position: InsertPosition::Begin,
        };
        let (ins_tokens, map) = insert_tokens(tokens, &spec, config.max_seq)?;
        let (_, trace_base) = forward(tokens, weights, config, None)?;
        let (_, trace_ins) = forward(&ins_tokens, weights, config, None)?;
        let lambda = extract_lambda(&trace_base, &trace_ins, &map, 0, 0)?;
        let sigma = compute_bias(&trace_ins, &map, 0, 0)?;
        let s = lambda.len() as f64;
        let lambda_mean = lambda.iter().sum::<f64>() / s;
        let sigma_l2_mean = (0..map.orig_to_new.len())
            .map(|t| row_norm_f64(sigma.row(t)))
            .sum::<f64>()
            / s;
        let result = emulate_vs_actual(tokens, &spec, weights, config, 0, 0)?;
        rows.push(SweepRow {
            k,
            lambda_mean,
            sigma_l2_mean,
            residual_mean: result.mean_residual,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use crate::transformer::{init_weights, LayerTrace};

    #[test]
    fn insertion_between_matches_hand_layout() {
        let (seq, map) = insert_tokens(
            &[10, 11, 12],
            &InsertionSpec {
                token_id: 7,
                count: 2,
                position: InsertPosition::Between { boundary: 1 },
            },
            16,
        )
        .unwrap();
        assert_eq!(seq, vec![10, 7, 7, 11, 12]);
        assert_eq!(map.orig_to_new, vec![0, 3, 4]);
        assert_eq!(map.inserted, vec![1, 2]);
    }

    #[test]
    fn insertion_count_zero_is_identity() {
        let (seq, map) = insert_tokens(
            &[1, 2, 3],
            &InsertionSpec {
                token_id: 9,
                count: 0,
                position: InsertPosition::End,
            },
            8,
        )
        .unwrap();
        assert_eq!(seq, vec![1, 2, 3]);
        assert_eq!(map, IndexMap::identity(3));
    }

    #[test]
    fn insertion_positions_resolve() {
        let begin = insert_tokens(
            &[1, 2],
            &InsertionSpec {
                token_id: 0,
                count: 1,
                position: InsertPosition::Begin,
            },
            8,
        )
        .unwrap();
        assert_eq!(begin.0, vec![0, 1, 2]);
        assert_eq!(begin.1.orig_to_new, vec![1, 2]);
        let end = insert_tokens(
            &[1, 2],
            &InsertionSpec {
                token_id: 0,
                count: 2,
                position: InsertPosition::End,
            },
            8,
        )
        .unwrap();
        assert_eq!(end.0, vec![1, 2, 0, 0]);
        assert_eq!(end.1.orig_to_new, vec![0, 1]);
        let at = resolve_position(InsertPosition::Random { seed: 3 }, 5).unwrap();
        assert!(at <= 5);
        assert_eq!(at, resolve_position(InsertPosition::Random { seed: 3 }, 5).unwrap());
    }

    #[test]
    fn insertion_rejects_overflow_and_bad_boundary() {
        assert!(matches!(
            insert_tokens(
                &[1, 2, 3],
                &InsertionSpec {
                    token_id: 0,
                    count: 6,
                    position: InsertPosition::End,
                },
                8,
            ),
            Err(Error::SequenceTooLong { len: 9, max: 8 })
        ));
        assert!(insert_sequence(&[1, 2], 3, &[0], 8).is_err());
    }

    #[test]
    fn affine_application_matches_hand_arithmetic() {
        let x = Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let params = AffineParams {
            lambda: vec![0.5],
            sigma: Tensor::new(vec![1, 2], vec![0.1, 0.1]).unwrap(),
        };
        let out = apply_affine(&x, &params).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15);
        assert!((out.data()[1] - 1.1).abs() < 1e-15);
        // Identity parameters leave the input bit-identical.
        let id = AffineParams {
            lambda: vec![1.0],
            sigma: Tensor::zeros(vec![1, 2]),
        };
        assert_eq!(apply_affine(&x, &id).unwrap(), x);
        // Non-positive lambda is rejected.
        let bad = AffineParams {
            lambda: vec![0.0],
            sigma: Tensor::zeros(vec![1, 2]),
        };
        assert!(apply_affine(&x, &bad).is_err());
    }

    /// A trace with one layer and one head, built directly from an
    /// attention matrix and value rows.
    fn hand_trace(w: Tensor<f64>, v: Tensor<f64>) -> ForwardTrace<f64> {
        let (s, _) = w.dims2("test").unwrap();
        ForwardTrace {
            layers: vec![LayerTrace {
                head_matrices: vec![w],
                head_values: vec![v],
                head_outputs: vec![Tensor::zeros(vec![s, 2])],
                attn_output: Tensor::zeros(vec![s, 2]),
                mlp_pre_hook: Tensor::zeros(vec![s, 2]),
                mlp_post_hook: Tensor::zeros(vec![s, 2]),
            }],
            logits: Tensor::zeros(vec![s, 2]),
        }
    }

    #[test]
    fn lambda_and_sigma_match_hand_sums() {
        // Base: 3 tokens. Insertion: 2 fillers at boundary 1 -> S' = 5,
        // originals at new positions [0, 3, 4], fillers at [1, 2].
        let w_base = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.3, 0.7, 0.0, 0.2, 0.3, 0.5],
        )
        .unwrap();
        let w_ins = Tensor::new(
            vec![5, 5],
            vec![
                1.0, 0.0, 0.0, 0.0, 0.0, // new 0 = original 0
                0.5, 0.5, 0.0, 0.0, 0.0, // filler
                0.2, 0.4, 0.4, 0.0, 0.0, // filler
                0.2, 0.15, 0.15, 0.5, 0.0, // new 3 = original 1
                0.1, 0.2, 0.2, 0.2, 0.3, // new 4 = original 2
            ],
        )
        .unwrap();
        let v_ins = Tensor::new(
            vec![5, 2],
            vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0],
        )
        .unwrap();
        let map = IndexMap {
            orig_to_new: vec![0, 3, 4],
            inserted: vec![1, 2],
        };
        let base = hand_trace(w_base, Tensor::zeros(vec![3, 2]));
        let ins = hand_trace(w_ins, v_ins);
        let lambda = extract_lambda(&base, &ins, &map, 0, 0).unwrap();
        // Retained mass: row 0 keeps 1.0; row 3 keeps 0.2 + 0.5; row 4
        // keeps 0.1 + 0.2 + 0.3.
        assert!((lambda[0] - 1.0).abs() < 1e-12);
        assert!((lambda[1] - 0.7).abs() < 1e-12);
        assert!((lambda[2] - 0.6).abs() < 1e-12);
        let sigma = compute_bias(&ins, &map, 0, 0).unwrap();
        // Token 1: 0.15 * [1, 2] + 0.15 * [3, 4] = [0.6, 0.9].
        assert!((sigma.at2(1, 0) - 0.6).abs() < 1e-12);
        assert!((sigma.at2(1, 1) - 0.9).abs() < 1e-12);
        // Token 0 attends to no filler (causal): zero shift.
        assert_eq!(sigma.row(0), &[0.0, 0.0]);
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            vocab_size: 40,
            activation: Activation::Silu,
            norm_eps: 1e-6,
            max_seq: 64,
        }
    }

    #[test]
    fn first_layer_affine_model_is_exact() {
        let config = small_config();
        let weights = init_weights::<f64>(&config, 21).unwrap();
        let tokens = [3u32, 17, 5, 29, 8, 11];
        for (count, boundary) in [(1usize, 0usize), (4, 3), (8, 6)] {
            let spec = InsertionSpec {
                token_id: 33,
                count,
                position: InsertPosition::Between { boundary },
            };
            for head in 0..config.n_heads {
                let result =
                    emulate_vs_actual(&tokens, &spec, &weights, &config, 0, head).unwrap();
                assert!(
                    result.mean_residual <= 1e-5,
                    "count={count} head={head}: residual {}",
                    result.mean_residual
                );
                assert!(result.lambda_min > 0.0);
                assert!(result.lambda_max <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn count_zero_gives_identity_emulation() {
        let config = small_config();
        let weights = init_weights::<f64>(&config, 4).unwrap();
        let spec = InsertionSpec {
            token_id: 0,
            count: 0,
            position: InsertPosition::Begin,
        };
        let result = emulate_vs_actual(&[1, 2, 3, 4], &spec, &weights, &config, 0, 0).unwrap();
        assert!(result.per_token_residual.iter().all(|r| *r == 0.0));
        assert_eq!(result.lambda_mean, 1.0);
        assert_eq!(result.sigma_coherence, None);
    }

    #[test]
    fn retained_plus_filler_mass_is_one() {
        let config = small_config();
        let weights = init_weights::<f64>(&config, 9).unwrap();
        let tokens = [2u32, 13, 25, 7, 19];
        let spec = InsertionSpec {
            token_id: 30,
            count: 5,
            position: InsertPosition::Begin,
        };
        let (ins_tokens, map) = insert_tokens(&tokens, &spec, config.max_seq).unwrap();
        let (_, base) = forward(&tokens, &weights, &config, None).unwrap();
        let (_, ins) = forward(&ins_tokens, &weights, &config, None).unwrap();
        for layer in 0..config.n_layers {
            for head in 0..config.n_heads {
                let lambda = extract_lambda(&base, &ins, &map, layer, head).unwrap();
                let w = &ins.layers[layer].head_matrices[head];
                for (t, &new_t) in map.orig_to_new.iter().enumerate() {
                    let filler_mass: f64 = map
                        .inserted
                        .iter()
                        .map(|&i| w.row(new_t)[i])
                        .sum();
                    assert!(
                        (lambda[t] + filler_mass - 1.0).abs() <= 1e-6,
                        "layer {layer} head {head} token {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn repeated_filler_is_more_coherent_than_distinct_tokens() {
        let config = small_config();
        let weights = init_weights::<f64>(&config, 15).unwrap();
        let tokens = [4u32, 22, 9, 31, 14, 2];
        let spec = InsertionSpec {
            token_id: 27,
            count: 4,
            position: InsertPosition::Begin,
        };
        let repeated = emulate_vs_actual(&tokens, &spec, &weights, &config, 0, 0).unwrap();
        let coherent = repeated.sigma_coherence.expect("enough sigma vectors");
        // Identical filler tokens have identical value rows in the first
        // layer, so every sigma points along the same direction.
        assert!((coherent - 1.0).abs() <= 1e-5, "coherence {coherent}");
        let distinct =
            emulate_sequence(&tokens, &[6, 18, 35, 12], 0, &weights, &config, 0, 0).unwrap();
        let lower = distinct.sigma_coherence.expect("enough sigma vectors");
        assert!(
            lower < coherent - 1e-3,
            "distinct fillers should scatter sigma: {lower} vs {coherent}"
        );
    }

    #[test]
    fn sweep_accumulates_with_length() {
        let config = small_config();
        let weights = init_weights::<f64>(&config, 33).unwrap();
        let tokens = [5u32, 12, 20, 3];
        let rows = sweep_lengths(&tokens, 36, &[0, 1, 8, 32], &weights, &config).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].k, 0);
        assert_eq!(rows[0].lambda_mean, 1.0);
        assert_eq!(rows[0].sigma_l2_mean, 0.0);
        assert!(rows[0].residual_mean == 0.0);
        // Longer runs strip more attention mass and accumulate more shift.
        assert!(rows[3].lambda_mean < rows[1].lambda_mean);
        assert!(rows[3].sigma_l2_mean > rows[1].sigma_l2_mean);
        assert!(rows[1].sigma_l2_mean > 0.0);
        // The first layer stays exact at every length.
        assert!(rows.iter().all(|r| r.residual_mean <= 1e-5));
    }
}
