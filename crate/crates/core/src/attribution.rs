// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt-to-response attribution.
//!
//! For a prompt `x_1..x_N` and response `y_1..y_M`, the importance of prompt
//! token `n` to response token `m` is the drop in `p(y_m | Z_m)` when the
//! input-embedding row of `x_n` is zeroed, where `Z_m` is the prompt
//! followed by `y_1..y_{m-1}`. The gradient method replaces the drop with
//! its first-order estimate `grad_n · E_i[x_n]`.
//!
//! Importances are then quantized per response column to integer levels
//! `ceil(L · I / max I)`, keeping only levels above `b`, and each prompt
//! token's level row is summarized by its l1/lp density.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelBundle, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::runtime::{embedding_gradient, occluded_prob, GradientTarget, Occlusion};
use crate::stats::{welch_t_test, Alternative, WelchResult};
use crate::tensor::Matrix;

/// Relative slack applied before taking the ceiling, so that level
/// boundaries do not flip under rounding of rescaled `f32` inputs.
pub const LEVEL_SNAP: f64 = 1e-6;

/// Above this many prompt x response cells, [`ImportanceMethod::Auto`] uses gradients.
pub const AUTO_OCCLUSION_CELLS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMethod {
    Occlusion,
    Gradient,
    /// Occlusion for small maps, gradient otherwise.
    #[default]
    Auto,
}

impl ImportanceMethod {
    /// Concrete method for an `n x m` map.
    pub fn resolve(self, n: usize, m: usize) -> Self {
        match self {
            Self::Auto if n * m <= AUTO_OCCLUSION_CELLS => Self::Occlusion,
            Self::Auto => Self::Gradient,
            other => other,
        }
    }
}

/// Hyperparameters for maps, densities and instance scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionParams {
    pub level_count: u32,
    pub threshold_b: u32,
    pub p_norm: f64,
    pub min_response_len: usize,
    pub method: ImportanceMethod,
    pub gradient_target: GradientTarget,
    /// Worker threads for response columns; 0 means rayon's default.
    pub workers: usize,
}

impl Default for AttributionParams {
    fn default() -> Self {
        Self {
            level_count: 10,
            threshold_b: 7,
            p_norm: 4.0,
            min_response_len: 5,
            method: ImportanceMethod::Auto,
            gradient_target: GradientTarget::Probability,
            workers: 0,
        }
    }
}

fn check_pair(prompt: &[TokenId], response: &[TokenId]) -> Result<()> {
    if prompt.is_empty() || response.is_empty() {
        return Err(Error::InvalidArgument("prompt and response must be nonempty".into()));
    }
    Ok(())
}

/// Importance matrix `I` (prompt rows x response columns).
///
/// Columns are independent and may run on `workers` threads; the result
/// does not depend on the worker count.
pub fn importance_matrix(
    bundle: &ModelBundle,
    prompt: &[TokenId],
    response: &[TokenId],
    method: ImportanceMethod,
    target: GradientTarget,
    workers: usize,
) -> Result<Matrix> {
    check_pair(prompt, response)?;
    let (n, m) = (prompt.len(), response.len());
    let method = method.resolve(n, m);
    let columns = map_indexed(workers, m, |j| {
        let mut context = Vec::with_capacity(n + j);
        context.extend_from_slice(prompt);
        context.extend_from_slice(&response[..j]);
        let y = response[j];
        match method {
            ImportanceMethod::Gradient => {
                let grad = embedding_gradient(bundle, &context, y, target)?;
                Ok((0..n)
                    .map(|i| {
                        let e = bundle.input_embeddings().row(prompt[i]);
                        grad.row(i).iter().zip(e).map(|(g, &x)| g * f64::from(x)).sum::<f64>()
                    })
                    .collect::<Vec<f64>>())
            }
            _ => {
                let base = occluded_prob(bundle, &context, Occlusion::None, y)?;
                (0..n)
                    .map(|i| Ok(base - occluded_prob(bundle, &context, Occlusion::Position(i), y)?))
                    .collect::<Result<Vec<f64>>>()
            }
        }
    })?;
    let mut data = vec![0.0f64; n * m];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * m + j] = *v;
        }
    }
    Matrix::from_f64(n, m, &data)
}

/// Pre-threshold levels `ceil(L · I / colmax)` in `0..=L`; columns with a
/// non-positive max are all zero, and negative importances get level 0.
pub fn quantize_levels(importance: &Matrix, level_count: u32) -> Matrix {
    let (n, m) = importance.shape();
    let mut out = Matrix::zeros(n, m);
    let l = f64::from(level_count);
    for j in 0..m {
        let max = (0..n).map(|i| f64::from(importance.get(i, j))).fold(f64::NEG_INFINITY, f64::max);
        if max <= 0.0 {
            continue;
        }
        for i in 0..n {
            let ratio = f64::from(importance.get(i, j)) / max;
            let level = (l * ratio * (1.0 - LEVEL_SNAP)).ceil().max(0.0);
            out.set(i, j, level as f32).expect("levels are finite");
        }
    }
    out
}

/// Normalized map `S`: quantized levels above `threshold_b`, else 0.
pub fn normalize_map(importance: &Matrix, level_count: u32, threshold_b: u32) -> Result<Matrix> {
    if threshold_b > level_count {
        return Err(Error::InvalidArgument(format!(
            "threshold b = {threshold_b} exceeds level count L = {level_count}"
        )));
    }
    let mut s = quantize_levels(importance, level_count);
    let b = threshold_b as f32;
    for r in 0..s.rows() {
        for v in s.row_mut(r) {
            if *v <= b {
                *v = 0.0;
            }
        }
    }
    Ok(s)
}

/// `||s||_1 / ||s||_p` for a nonnegative row; 0 for an all-zero row.
pub fn density(row: &[f32], p_norm: f64) -> f64 {
    let max = row.iter().fold(0.0f64, |a, &v| a.max(f64::from(v).abs()));
    if max == 0.0 {
        return 0.0;
    }
    let l1: f64 = row.iter().map(|&v| f64::from(v).abs()).sum();
    // scale by the max so the p-th powers stay in range
    let lp = max * row.iter().map(|&v| (f64::from(v).abs() / max).powf(p_norm)).sum::<f64>().powf(1.0 / p_norm);
    l1 / lp
}

/// Per-prompt-token densities of a normalized map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub raw_density: Vec<f64>,
    /// `raw_density` divided by its mean; all zeros if every density is 0.
    pub instance_normalized: Vec<f64>,
    pub p_norm: f64,
}

impl DensityProfile {
    pub fn from_normalized(normalized: &Matrix, p_norm: f64) -> Self {
        let raw: Vec<f64> = (0..normalized.rows()).map(|r| density(normalized.row(r), p_norm)).collect();
        let mean = crate::stats::mean(&raw);
        let instance_normalized = if mean > 0.0 {
            raw.iter().map(|d| d / mean).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self {
            raw_density: raw,
            instance_normalized,
            p_norm,
        }
    }

    pub fn has_mass(&self) -> bool {
        self.raw_density.iter().any(|&d| d > 0.0)
    }
}

/// Importance and normalized maps for one prompt/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientMap {
    pub prompt_ids: Vec<TokenId>,
    pub response_ids: Vec<TokenId>,
    pub prompt_tokens: Vec<String>,
    pub response_tokens: Vec<String>,
    pub importance: Matrix,
    pub normalized: Matrix,
    pub level_count: u32,
    pub threshold_b: u32,
    pub method: ImportanceMethod,
}

impl SalientMap {
    pub fn compute(
        bundle: &ModelBundle,
        prompt: &[TokenId],
        response: &[TokenId],
        params: &AttributionParams,
    ) -> Result<Self> {
        check_pair(prompt, response)?;
        let method = params.method.resolve(prompt.len(), response.len());
        let importance =
            importance_matrix(bundle, prompt, response, method, params.gradient_target, params.workers)?;
        let normalized = normalize_map(&importance, params.level_count, params.threshold_b)?;
        let vocab = bundle.vocabulary();
        let names = |ids: &[TokenId]| ids.iter().map(|&i| vocab.token(i).unwrap_or_default().to_string()).collect();
        Ok(Self {
            prompt_ids: prompt.to_vec(),
            response_ids: response.to_vec(),
            prompt_tokens: names(prompt),
            response_tokens: names(response),
            importance,
            normalized,
            level_count: params.level_count,
            threshold_b: params.threshold_b,
            method,
        })
    }

    pub fn densities(&self, p_norm: f64) -> DensityProfile {
        DensityProfile::from_normalized(&self.normalized, p_norm)
    }

    /// `S` as tab-separated integers, one prompt token per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.normalized.rows() {
            let row: Vec<String> = self.normalized.row(r).iter().map(|v| format!("{}", *v as i64)).collect();
            writeln!(out, "{}", row.join("\t")).expect("write to string");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean instance-normalized density over the instruction tokens.
///
/// Fails with [`Error::Excluded`] when the response is shorter than
/// `min_response_len` or the map has no positive density.
pub fn instance_score(
    map: &SalientMap,
    instruction_tokens: &[usize],
    p_norm: f64,
    min_response_len: usize,
) -> Result<f64> {
    if map.response_ids.len() < min_response_len {
        return Err(Error::Excluded(format!(
            "response has {} tokens, minimum is {min_response_len}",
            map.response_ids.len()
        )));
    }
    if instruction_tokens.is_empty() {
        return Err(Error::Excluded("no instruction tokens".into()));
    }
    let profile = map.densities(p_norm);
    if !profile.has_mass() {
        return Err(Error::Excluded("map has no positive density".into()));
    }
    score_span(&profile.instance_normalized, instruction_tokens)
}

/// Mean of `values` over `indices`.
pub fn score_span(values: &[f64], indices: &[usize]) -> Result<f64> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= values.len()) {
        return Err(Error::OutOfRange(format!("span token {bad} outside prompt of {}", values.len())));
    }
    Ok(indices.iter().map(|&i| values[i]).sum::<f64>() / indices.len() as f64)
}

/// Welch comparison of two score groups.
pub fn group_compare(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WelchResult> {
    welch_t_test(a, b, alternative)
}

/// Token ranges of sentences. A sentence ends after `.`, `!` or `?` followed
/// by whitespace or end of text, and at every newline. Each token belongs
/// to the sentence containing its first character; empty sentences are dropped.
pub fn sentence_boundaries(vocab: &Vocabulary, text: &str) -> Vec<Range<usize>> {
    let chars: Vec<char> = text.chars().collect();
    // sentence index for every char
    let mut sentence_of = Vec::with_capacity(chars.len());
    let mut current = 0usize;
    let mut fresh = true; // no character assigned to `current` yet
    for (i, &c) in chars.iter().enumerate() {
        // whitespace right after a boundary stays with the sentence it follows
        if fresh && current > 0 && c.is_whitespace() {
            sentence_of.push(current - 1);
            continue;
        }
        sentence_of.push(current);
        fresh = false;
        let next_blank = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if c == '\n' || (matches!(c, '.' | '!' | '?') && next_blank) {
            current += 1;
            fresh = true;
        }
    }
    let spans = vocab.tokenize_spans(text);
    let mut out: Vec<Range<usize>> = Vec::new();
    let mut last_sentence = None;
    for (t, span) in spans.iter().enumerate() {
        let s = sentence_of[span.start];
        if last_sentence == Some(s) {
            out.last_mut().expect("open sentence").end = t + 1;
        } else {
            out.push(t..t + 1);
            last_sentence = Some(s);
        }
    }
    out
}

/// Average share of sentence density falling in each quarter of a sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProfile {
    pub shares: [f64; 4],
    /// Sentences with positive density mass that entered the average.
    pub sentences: usize,
}

/// Splits each sentence into four segments with boundaries `ceil(k · N_s / 4)`,
/// normalizes token densities by the sentence sum and averages the segment
/// totals over sentences with positive mass.
pub fn segment_profile(densities: &[f64], sentences: &[Range<usize>]) -> Result<SegmentProfile> {
    let mut acc = [0.0f64; 4];
    let mut used = 0usize;
    for s in sentences {
        if s.end > densities.len() || s.start > s.end {
            return Err(Error::OutOfRange(format!(
                "sentence {}..{} outside {} tokens",
                s.start,
                s.end,
                densities.len()
            )));
        }
        let d = &densities[s.clone()];
        let total: f64 = d.iter().sum();
        if d.is_empty() || total <= 0.0 {
            continue;
        }
        let len = d.len();
        let mut start = 0;
        for (k, slot) in acc.iter_mut().enumerate() {
            let end = ((k + 1) * len).div_ceil(4);
            *slot += d[start..end].iter().sum::<f64>() / total;
            start = end;
        }
        used += 1;
    }
    if used > 0 {
        for v in &mut acc {
            *v /= used as f64;
        }
    }
    Ok(SegmentProfile {
        shares: acc,
        sentences: used,
    })
}

/// One labelled prompt/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub prompt: String,
    pub response: String,
    /// Character ranges `[start, end)` into `prompt`.
    pub instruction_spans: Vec<[usize; 2]>,
    pub followed: bool,
    pub dataset: String,
}

impl AnnotatedInstance {
    pub fn validate(&self) -> Result<()> {
        let len = self.prompt.chars().count();
        let mut spans = self.instruction_spans.clone();
        spans.sort_unstable();
        let mut prev_end = 0;
        for [s, e] in spans {
            if s >= e || e > len {
                return Err(Error::InvalidArgument(format!(
                    "instruction span [{s}, {e}) invalid for a prompt of {len} characters"
                )));
            }
            if s < prev_end {
                return Err(Error::InvalidArgument("instruction spans overlap".into()));
            }
            prev_end = e;
        }
        Ok(())
    }

    /// Prompt token indices overlapping any instruction span, ascending.
    pub fn instruction_tokens(&self, vocab: &Vocabulary) -> Vec<usize> {
        vocab
            .tokenize_spans(&self.prompt)
            .iter()
            .enumerate()
            .filter(|(_, t)| self.instruction_spans.iter().any(|[s, e]| t.start < *e && *s < t.end))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Reads a JSON-lines instance file; blank lines are skipped.
pub fn load_instances(path: &Path) -> Result<Vec<AnnotatedInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: AnnotatedInstance =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        inst.validate().map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_instances(path: &Path, instances: &[AnnotatedInstance]) -> Result<()> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
