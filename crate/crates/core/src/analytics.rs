//! Measurement instruments: attention profiles, activation histograms and
//! summary metrics, token-class activation proportions, n-gram diversity,
//! pass@k, and a toy tokenizer for class analysis.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::percentile;
use crate::tensor::Tensor;
use crate::transformer::ForwardTrace;

// ── attention profile ───────────────────────────────────────────────────────

/// Per-position mean of the attention column below the diagonal: how much
/// later tokens attend to this one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub scores: Vec<f64>,
}

/// `score_j = mean over i > j of attn[i, j]`; the last column's score is 0
/// (empty sub-column).
pub fn column_mean_below_diag<T: Scalar>(attn: &Tensor<T>) -> Result<AttentionProfile> {
    let (s, s2) = attn.dims2("column_mean_below_diag")?;
    if s != s2 {
        return Err(Error::shape(
            "column_mean_below_diag",
            format!("expected a square matrix, got [{s}, {s2}]"),
        ));
    }
    let mut scores = Vec::with_capacity(s);
    for j in 0..s {
        let below = s - j - 1;
        if below == 0 {
            scores.push(0.0);
        } else {
            let mut total = 0.0f64;
            for i in j + 1..s {
                total += attn.at2(i, j).to_f64c();
            }
            scores.push(total / below as f64);
        }
    }
    Ok(AttentionProfile { scores })
}

/// Position-wise mean of several profiles (e.g. across heads).
pub fn mean_profiles(profiles: &[AttentionProfile]) -> Result<AttentionProfile> {
    let first = profiles
        .first()
        .ok_or(Error::EmptyInput("mean_profiles"))?;
    let len = first.scores.len();
    if profiles.iter().any(|p| p.scores.len() != len) {
        return Err(Error::shape("mean_profiles", "profiles differ in length"));
    }
    let mut scores = vec![0.0f64; len];
    for p in profiles {
        for (acc, s) in scores.iter_mut().zip(&p.scores) {
            *acc += s;
        }
    }
    for s in &mut scores {
        *s /= profiles.len() as f64;
    }
    Ok(AttentionProfile { scores })
}

// ── histogram ───────────────────────────────────────────────────────────────

/// Equal-width histogram: `n_bins + 1` ascending edges plus per-bin counts.
///
/// `range: None` uses `[min, max]` of the data; a constant input widens
/// that to `[v − 0.5, v + 0.5]` so exactly one bin is occupied. Values at
/// or above the top edge land in the last bin; with an explicit range,
/// values outside it clamp to the edge bins.
pub fn histogram<T: Scalar>(
    acts: &Tensor<T>,
    n_bins: usize,
    range: Option<(f64, f64)>,
) -> Result<(Vec<f64>, Vec<u64>)> {
    if acts.is_empty() {
        return Err(Error::EmptyInput("histogram"));
    }
    if n_bins == 0 {
        return Err(Error::invalid("histogram", "n_bins must be at least 1"));
    }
    acts.ensure_finite("histogram")?;
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(
                    "histogram",
                    format!("range must satisfy lo < hi, got ({lo}, {hi})"),
                ));
            }
            (lo, hi)
        }
        None => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in acts.data() {
                let x = v.to_f64c();
                lo = lo.min(x);
                hi = hi.max(x);
            }
            if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        }
    };
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| if i == n_bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0u64; n_bins];
    for v in acts.data() {
        let x = v.to_f64c();
        let idx = if x >= hi {
            n_bins - 1
        } else if x <= lo {
            0
        } else {
            (((x - lo) / width) as usize).min(n_bins - 1)
        };
        counts[idx] += 1;
    }
    Ok((edges, counts))
}

// ── scalar metrics ──────────────────────────────────────────────────────────

/// Fraction of `new` entries strictly below the `q`-th percentile of the
/// baseline magnitudes. Returns the fraction; the threshold itself is
/// available via [`sparsity_threshold`].
pub fn relative_sparsity<T: Scalar>(base: &Tensor<T>, new: &Tensor<T>, q: f64) -> Result<f64> {
    let tau = sparsity_threshold(base, q)?;
    if new.is_empty() {
        return Err(Error::EmptyInput("relative_sparsity"));
    }
    let below = new.data().iter().filter(|x| x.abs() < tau).count();
    Ok(below as f64 / new.len() as f64)
}

/// The `q`-th percentile of `|base|`, the threshold used by
/// [`relative_sparsity`].
pub fn sparsity_threshold<T: Scalar>(base: &Tensor<T>, q: f64) -> Result<T> {
    if base.is_empty() {
        return Err(Error::EmptyInput("sparsity_threshold"));
    }
    let magnitudes: Vec<T> = base.data().iter().map(|x| x.abs()).collect();
    percentile(&magnitudes, q)
}

/// `Σ|x|`.
pub fn l1_norm<T: Scalar>(acts: &Tensor<T>) -> f64 {
    acts.data().iter().map(|x| x.abs().to_f64c()).sum()
}

/// `sqrt(Σ x²)`.
pub fn l2_norm<T: Scalar>(acts: &Tensor<T>) -> f64 {
    acts.data()
        .iter()
        .map(|x| x.to_f64c().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Gini coefficient of a bin-count distribution,
/// `G = Σ_i Σ_j |c_i − c_j| / (2 n Σ c)`, in `[0, 1)`. Computed via the
/// sorted form in `O(n log n)`.
pub fn gini(counts: &[f64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("gini"));
    }
    if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::invalid("gini", "counts must be finite and non-negative"));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("gini", "total count must be positive"));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut acc = 0.0;
    for (i, c) in sorted.iter().enumerate() {
        acc += (2.0 * (i + 1) as f64 - n - 1.0) * c;
    }
    Ok(acc / (n * total))
}

/// The four activation indicators, measured on a post-transformation tensor
/// against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMetrics {
    pub relative_sparsity: f64,
    pub l1: f64,
    pub l2: f64,
    pub gini: f64,
}

/// Compute all four metrics of `new` against `base`, plus the sparsity
/// threshold `tau`. The Gini runs over an `n_bins`-bin histogram of `new`
/// on a symmetric range `[−max|new|, max|new|]` (widened when degenerate).
pub fn activation_metrics<T: Scalar>(
    base: &Tensor<T>,
    new: &Tensor<T>,
    q: f64,
    n_bins: usize,
) -> Result<(ActivationMetrics, f64)> {
    let tau = sparsity_threshold(base, q)?;
    let relative = relative_sparsity(base, new, q)?;
    let m = new
        .data()
        .iter()
        .map(|x| x.abs().to_f64c())
        .fold(0.0f64, f64::max);
    let range = if m > 0.0 { (-m, m) } else { (-0.5, 0.5) };
    let (_, counts) = histogram(new, n_bins, Some(range))?;
    let counts_f: Vec<f64> = counts.iter().map(|c| *c as f64).collect();
    let metrics = ActivationMetrics {
        relative_sparsity: relative,
        l1: l1_norm(new),
        l2: l2_norm(new),
        gini: gini(&counts_f)?,
    };
    Ok((metrics, tau.to_f64c()))
}

// ── token classes ───────────────────────────────────────────────────────────

/// Total partition of token texts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Digit,
    Operator,
    Conjunction,
    Other,
}

/// Tokens counted as operators (after trimming).
pub const OPERATORS: &[&str] = &["+", "-", "*", "/", "=", "<", ">", "^", "%", "(", ")"];
/// Words counted as conjunctions (lowercased, after trimming).
pub const CONJUNCTIONS: &[&str] = &[
    "and", "or", "but", "so", "because", "then", "thus", "therefore", "since", "hence", "if",
];

/// Classify a token text: digit when it has alphanumeric characters and all
/// of them are `0-9`; operator per [`OPERATORS`]; conjunction per
/// [`CONJUNCTIONS`]; otherwise other.
pub fn classify_token(text: &str) -> TokenClass {
    let trimmed = text.trim();
    let mut has_alnum = false;
    let mut all_digits = true;
    for ch in trimmed.chars() {
        if ch.is_alphanumeric() {
            has_alnum = true;
            if !ch.is_ascii_digit() {
                all_digits = false;
            }
        }
    }
    if has_alnum && all_digits {
        return TokenClass::Digit;
    }
    if OPERATORS.contains(&trimmed) {
        return TokenClass::Operator;
    }
    if CONJUNCTIONS.contains(&trimmed.to_lowercase().as_str()) {
        return TokenClass::Conjunction;
    }
    TokenClass::Other
}

/// Per-class mean fraction of first-layer post-activation dimensions with
/// `|a| <= epsilon`. Classes with no tokens are absent from the map.
pub fn near_zero_proportion_by_class<T: Scalar, S: AsRef<str>>(
    trace: &ForwardTrace<T>,
    token_texts: &[S],
    epsilon: f64,
) -> Result<BTreeMap<TokenClass, f64>> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::invalid(
            "near_zero_proportion_by_class",
            "epsilon must be finite and >= 0",
        ));
    }
    let first = trace
        .layers
        .first()
        .ok_or(Error::EmptyInput("near_zero_proportion_by_class"))?;
    let (s, d_ff) = first.mlp_pre_hook.dims2("near_zero_proportion_by_class")?;
    if token_texts.len() != s {
        return Err(Error::shape(
            "near_zero_proportion_by_class",
            format!("{} token texts vs {s} trace positions", token_texts.len()),
        ));
    }
    let mut sums: BTreeMap<TokenClass, (f64, usize)> = BTreeMap::new();
    for (t, text) in token_texts.iter().enumerate() {
        let class = classify_token(text.as_ref());
        let row = first.mlp_pre_hook.row(t);
        let near = row
            .iter()
            .filter(|a| a.abs().to_f64c() <= epsilon)
            .count();
        let entry = sums.entry(class).or_insert((0.0, 0));
        entry.0 += near as f64 / d_ff as f64;
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(class, (total, n))| (class, total / n as f64))
        .collect())
}

// ── diversity and pass@k ────────────────────────────────────────────────────

/// Distinct vs total n-gram occurrences across a set of sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub distinct_n: usize,
    pub total_n: usize,
    /// `distinct_n / total_n`, or 0 when there are no n-grams at all.
    pub ratio: f64,
}

/// N-gram diversity over all sequences; sequences shorter than `n`
/// contribute nothing.
pub fn ngram_diversity(sequences: &[Vec<u32>], n: usize) -> Result<DiversityScore> {
    if n == 0 {
        return Err(Error::invalid("ngram_diversity", "n must be at least 1"));
    }
    let mut distinct: HashSet<&[u32]> = HashSet::new();
    let mut total = 0usize;
    for seq in sequences {
        if seq.len() >= n {
            for gram in seq.windows(n) {
                distinct.insert(gram);
                total += 1;
            }
        }
    }
    let ratio = if total > 0 {
        distinct.len() as f64 / total as f64
    } else {
        0.0
    };
    Ok(DiversityScore {
        distinct_n: distinct.len(),
        total_n: total,
        ratio,
    })
}

/// Fraction of problems where any of the first `k` samples is correct.
/// This is the simple any-of-k rate, not the unbiased combinatorial
/// estimator — sample counts here are small.
pub fn pass_at_k(outcomes: &[Vec<bool>], k: usize) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput("pass_at_k"));
    }
    if k == 0 {
        return Err(Error::invalid("pass_at_k", "k must be at least 1"));
    }
    for (i, samples) in outcomes.iter().enumerate() {
        if samples.len() < k {
            return Err(Error::invalid(
                "pass_at_k",
                format!("problem {i} has {} samples, need at least {k}", samples.len()),
            ));
        }
    }
    let passed = outcomes
        .iter()
        .filter(|samples| samples[..k].iter().any(|b| *b))
        .count();
    Ok(passed as f64 / outcomes.len() as f64)
}

// ── toy tokenizer ───────────────────────────────────────────────────────────

/// Minimal splitter for class analysis: alphanumeric runs and single
/// non-whitespace symbols become tokens, interned in first-seen order.
/// Not a model of any real tokenizer.
#[derive(Debug, Clone, Default)]
pub struct ToyTokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

fn split_text(text: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut run = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            run.push(ch);
        } else {
            if !run.is_empty() {
                pieces.push(std::mem::take(&mut run));
            }
            if !ch.is_whitespace() {
                pieces.push(ch.to_string());
            }
        }
    }
    if !run.is_empty() {
        pieces.push(run);
    }
    pieces
}

impl ToyTokenizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tokenize and intern, assigning fresh ids in first-seen order.
    pub fn encode(&mut self, text: &str) -> Vec<u32> {
        split_text(text)
            .into_iter()
            .map(|piece| match self.ids.get(&piece) {
                Some(&id) => id,
                None => {
                    let id = self.tokens.len() as u32;
                    self.tokens.push(piece.clone());
                    self.ids.insert(piece, id);
                    id
                }
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.tokens
                    .get(id as usize)
                    .cloned()
                    .ok_or(Error::TokenOutOfRange {
                        id,
                        vocab: self.tokens.len(),
                    })
            })
            .collect()
    }

    pub fn token_text(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}
