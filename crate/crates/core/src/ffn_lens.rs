// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal directions of feed-forward value projections.
//!
//! For each layer the rows of `W_p` are centred column-wise, the covariance
//! `C = W̃_pᵀ W̃_p` is diagonalized, and each eigenvector is named by the
//! words whose output embeddings project most strongly onto it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelBundle, Vocabulary};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::tensor::{symmetric_eig_f64, top_k, EigenResult, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    /// Components kept per layer (clamped to `d_model`).
    pub rank: usize,
    /// Words per component.
    pub k: usize,
    /// Also list the words of the negated direction.
    pub both_signs: bool,
    pub workers: usize,
}

impl Default for FfnParams {
    fn default() -> Self {
        Self {
            rank: 300,
            k: 15,
            both_signs: false,
            workers: 0,
        }
    }
}

/// Column-centred copy of `w` in `f64` (row-major).
pub fn centralize_f64(w: &Matrix) -> Vec<f64> {
    let (rows, cols) = w.shape();
    let mut out = w.to_f64();
    for c in 0..cols {
        let mean = (0..rows).map(|r| out[r * cols + c]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            out[r * cols + c] -= mean;
        }
    }
    out
}

/// Subtracts each column's mean.
pub fn centralize(w: &Matrix) -> Matrix {
    let (rows, cols) = w.shape();
    Matrix::from_f64(rows, cols, &centralize_f64(w)).expect("finite input stays finite")
}

/// `W̃ᵀ W̃` for a centred row-major `rows x cols` matrix.
fn gram(centred: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut c = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in i..cols {
            let v: f64 = (0..rows).map(|r| centred[r * cols + i] * centred[r * cols + j]).sum();
            c[i * cols + j] = v;
            c[j * cols + i] = v;
        }
    }
    c
}

/// Flips eigenvectors so that each one's largest-magnitude entry is positive
/// (first such entry on ties).
pub fn canonicalize_signs(eig: &mut EigenResult) {
    let n = eig.dim();
    for col in 0..n {
        let mut best = 0;
        for r in 1..n {
            if eig.vectors[r * n + col].abs() > eig.vectors[best * n + col].abs() {
                best = r;
            }
        }
        if eig.vectors[best * n + col] < 0.0 {
            for r in 0..n {
                eig.vectors[r * n + col] = -eig.vectors[r * n + col];
            }
        }
    }
}

/// Cumulative explained-variance ratios `c_r = Σ_{i≤r} λ_i / Σ λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub layer: usize,
    pub cumulative: Vec<f64>,
}

impl VarianceCurve {
    /// From descending eigenvalues; slightly negative round-off values count as 0.
    pub fn from_eigenvalues(layer: usize, eigenvalues: &[f64]) -> Self {
        let clipped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        let total: f64 = clipped.iter().sum();
        let mut acc = 0.0;
        let cumulative = clipped
            .iter()
            .map(|l| {
                acc += l;
                if total > 0.0 {
                    (acc / total).min(1.0)
                } else {
                    1.0
                }
            })
            .collect();
        Self { layer, cumulative }
    }

    /// Cumulative ratio at rank `r` (1-based, clamped to the curve length).
    pub fn at(&self, r: usize) -> f64 {
        match self.cumulative.len() {
            0 => 0.0,
            n => self.cumulative[r.clamp(1, n) - 1],
        }
    }
}

/// Eigendecomposition of one layer's centred `W_p` covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPca {
    pub layer: usize,
    pub eigen: EigenResult,
    pub curve: VarianceCurve,
}

/// PCA of layer `layer`'s value projection with canonical signs.
pub fn ffn_pca(bundle: &ModelBundle, layer: usize) -> Result<LayerPca> {
    let wp = &bundle.layer(layer)?.wp;
    let (rows, cols) = wp.shape();
    let c = gram(&centralize_f64(wp), rows, cols);
    let mut eigen = symmetric_eig_f64(cols, &c)?;
    canonicalize_signs(&mut eigen);
    let curve = VarianceCurve::from_eigenvalues(layer, &eigen.eigenvalues);
    Ok(LayerPca { layer, eigen, curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub word: String,
    pub projection: f64,
}

/// Words scored against a direction: either every vocabulary token or a
/// restricted word list whose entries embed as the mean of their sub-tokens'
/// output embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    words: Vec<String>,
    /// Row-major `words.len() x d_model`.
    vectors: Vec<f64>,
    dim: usize,
}

impl CandidateSet {
    /// All vocabulary tokens with their output embeddings.
    pub fn vocabulary(bundle: &ModelBundle) -> Self {
        let e = bundle.output_embeddings();
        Self {
            words: bundle.vocabulary().tokens().to_vec(),
            vectors: e.to_f64(),
            dim: e.cols(),
        }
    }

    /// Restricted candidates. Words that tokenize to nothing or contain an
    /// unknown sub-token are dropped.
    pub fn restricted(bundle: &ModelBundle, words: &[String]) -> Result<Self> {
        let vocab: &Vocabulary = bundle.vocabulary();
        let e = bundle.output_embeddings();
        let dim = e.cols();
        let mut kept = Vec::new();
        let mut vectors = Vec::new();
        for w in words {
            let ids = vocab.tokenize(w);
            if ids.is_empty() || ids.contains(&vocab.unk_id()) {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for &id in &ids {
                for (m, &x) in mean.iter_mut().zip(e.row(id)) {
                    *m += f64::from(x);
                }
            }
            for m in &mut mean {
                *m /= ids.len() as f64;
            }
            kept.push(w.clone());
            vectors.extend(mean);
        }
        if kept.is_empty() {
            return Err(Error::InvalidArgument("no candidate word survives the vocabulary filter".into()));
        }
        Ok(Self {
            words: kept,
            vectors,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn scores(&self, direction: &[f64]) -> Vec<f64> {
        (0..self.words.len())
            .map(|w| self.vectors[w * self.dim..(w + 1) * self.dim].iter().zip(direction).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Top-`k` candidates by projection onto `direction`, ties by candidate order.
pub fn component_words(candidates: &CandidateSet, direction: &[f64], k: usize) -> Result<Vec<WordScore>> {
    if direction.len() != candidates.dim {
        return Err(Error::Dimension(format!(
            "direction of length {} against {}-dimensional embeddings",
            direction.len(),
            candidates.dim
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let scores = candidates.scores(direction);
    let idx = top_k(&scores, k.min(scores.len()))?;
    Ok(idx
        .into_iter()
        .map(|i| WordScore {
            word: candidates.words[i].clone(),
            projection: scores[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptComponent {
    pub layer: usize,
    /// 1-based rank.
    pub rank: usize,
    pub eigenvalue: f64,
    pub explained_ratio: f64,
    pub direction: Vec<f64>,
    pub top_words: Vec<WordScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_words: Option<Vec<WordScore>>,
}

/// Components and variance curve of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConcepts {
    pub layer: usize,
    pub components: Vec<ConceptComponent>,
    pub curve: VarianceCurve,
}

pub fn layer_concepts(bundle: &ModelBundle, layer: usize, candidates: &CandidateSet, params: &FfnParams) -> Result<LayerConcepts> {
    let pca = ffn_pca(bundle, layer)?;
    let total: f64 = pca.eigen.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let rank = params.rank.min(pca.eigen.dim());
    let components = (0..rank)
        .map(|r| {
            let direction = pca.eigen.vector(r);
            let lambda = pca.eigen.eigenvalues[r];
            let negative_words = if params.both_signs {
                let neg: Vec<f64> = direction.iter().map(|x| -x).collect();
                Some(component_words(candidates, &neg, params.k)?)
            } else {
                None
            };
            Ok(ConceptComponent {
                layer,
                rank: r + 1,
                eigenvalue: lambda,
                explained_ratio: if total > 0.0 { (lambda.max(0.0) / total).min(1.0) } else { 0.0 },
                top_words: component_words(candidates, &direction, params.k)?,
                negative_words,
                direction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerConcepts {
        layer,
        components,
        curve: pca.curve,
    })
}

/// Every layer of `bundle`; layers run in parallel.
pub fn analyze_bundle(bundle: &ModelBundle, candidates: &CandidateSet, params: &FfnParams) -> Result<Vec<LayerConcepts>> {
    map_indexed(params.workers, bundle.config().n_layers, |l| layer_concepts(bundle, l, candidates, params))
}

/// Per-band aggregate of layer curves and concept labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub band: crate::attn_lens::LayerBand,
    /// Mean cumulative explained variance at rank `rank`.
    pub cumulative_at_rank: f64,
    pub rank: usize,
    /// Percentage of labelled components carrying each label.
    pub label_percentages: BTreeMap<String, f64>,
}

/// Averages curves at `rank` over bands of `group_size` layers. `labels`, when
/// given, maps a layer to one label per labelled component.
pub fn layer_group_summary(
    curves: &[VarianceCurve],
    labels: Option<&BTreeMap<usize, Vec<String>>>,
    group_size: usize,
    rank: usize,
) -> Vec<BandSummary> {
    let n_layers = curves.iter().map(|c| c.layer + 1).max().unwrap_or(0);
    crate::attn_lens::layer_bands(n_layers, group_size)
        .into_iter()
        .filter_map(|band| {
            let in_band: Vec<&VarianceCurve> = curves.iter().filter(|c| band.contains(c.layer)).collect();
            if in_band.is_empty() {
                return None;
            }
            let cumulative_at_rank = in_band.iter().map(|c| c.at(rank)).sum::<f64>() / in_band.len() as f64;
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            let mut total = 0usize;
            if let Some(labels) = labels {
                for (_, ls) in labels.iter().filter(|(l, _)| band.contains(**l)) {
                    for l in ls {
                        *counts.entry(l.clone()).or_default() += 1;
                        total += 1;
                    }
                }
            }
            let label_percentages = counts
                .into_iter()
                .map(|(l, c)| (l, 100.0 * c as f64 / total as f64))
                .collect();
            Some(BandSummary {
                band,
                cumulative_at_rank,
                rank,
                label_percentages,
            })
        })
        .collect()
}

/// Component export for one layer: `{rank, eigenvalue, explained_ratio, words}`.
pub fn concepts_to_json(layer: &LayerConcepts) -> Result<String> {
    let comps: Vec<serde_json::Value> = layer
        .components
        .iter()
        .map(|c| {
            serde_json::json!({
                "rank": c.rank,
                "eigenvalue": c.eigenvalue,
                "explained_ratio": c.explained_ratio,
                "words": c.top_words,
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&serde_json::json!({ "layer": layer.layer, "components": comps }))?)
}

/// Variance curves as CSV: `layer,rank,cumulative`.
pub fn curves_to_csv(curves: &[VarianceCurve]) -> String {
    let mut out = String::from("layer,rank,cumulative\n");
    for c in curves {
        for (r, v) in c.cumulative.iter().enumerate() {
            writeln!(out, "{},{},{v}", c.layer, r + 1).expect("write to string");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{random_bundle, FixtureSpec};

    #[test]
    fn centralize_examples() {
        let w = Matrix::new(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let c = centralize(&w);
        assert_eq!(c.data(), &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(centralize(&c), c);
    }

    #[test]
    fn constant_shift_is_removed_exactly() {
        // dyadic entries keep every sum exact
        let base = Matrix::new(4, 3, (0..12).map(|i| (i as f32 - 5.0) * 0.25).collect()).unwrap();
        let mut shifted = base.clone();
        for r in 0..4 {
            for (c, shift) in [3.0f32, -2.5, 8.0].iter().enumerate() {
                shifted.set(r, c, base.get(r, c) + shift).unwrap();
            }
        }
        assert_eq!(centralize(&shifted), centralize(&base));
    }

    #[test]
    fn rank_one_spectrum() {
        let mut parts = random_bundle(&FixtureSpec::default(), 2).into_parts();
        let d = parts.config.d_model;
        let dir: Vec<f32> = (0..d).map(|i| (i as f32 * 0.37).sin()).collect();
        let rows: Vec<Vec<f32>> = (0..parts.config.d_ffn).map(|r| dir.iter().map(|x| x * (r as f32 - 7.0)).collect()).collect();
        parts.layers[0].wp = Matrix::from_rows(&rows).unwrap();
        let b = ModelBundle::from_parts(parts).unwrap();
        let pca = ffn_pca(&b, 0).unwrap();
        let l = &pca.eigen.eigenvalues;
        assert!(l[0] > 1.0);
        assert!(l[1..].iter().all(|v| v.abs() < 1e-9 * l[0]));
        assert!((pca.curve.at(1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn signs_are_canonical_and_stable() {
        let b = random_bundle(&FixtureSpec::default(), 6);
        let p1 = ffn_pca(&b, 1).unwrap();
        let p2 = ffn_pca(&b, 1).unwrap();
        assert_eq!(p1.eigen.vectors, p2.eigen.vectors);
        for r in 0..p1.eigen.dim() {
            let v = p1.eigen.vector(r);
            let m = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(m > 0.0);
        }
        let c = p1.curve.cumulative;
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
        assert!((c.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aligned_direction_ranks_first_and_negation_reverses() {
        let mut parts = random_bundle(&FixtureSpec::default(), 11).into_parts();
        let d = parts.config.d_model;
        // orthogonal fixture: one row along e_0 + e_1, one along e_0 - e_1, the rest zero
        for r in 0..parts.config.vocab_size {
            parts.output_embeddings.row_mut(r).fill(0.0);
        }
        parts.output_embeddings.row_mut(17)[..2].copy_from_slice(&[1.5, 1.5]);
        parts.output_embeddings.row_mut(3)[..2].copy_from_slice(&[2.0, -2.0]);
        let b = ModelBundle::from_parts(parts).unwrap();
        let cands = CandidateSet::vocabulary(&b);
        let mut row = vec![0.0; d];
        row[..2].copy_from_slice(&[1.5, 1.5]);
        let words = component_words(&cands, &row, 3).unwrap();
        assert_eq!(words[0].word, b.vocabulary().token(17).unwrap());
        assert_eq!(words[0].projection, 4.5);

        let b = random_bundle(&FixtureSpec::default(), 11);
        let cands = CandidateSet::vocabulary(&b);
        let row: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).cos()).collect();
        let all = component_words(&cands, &row, cands.len()).unwrap();
        let neg: Vec<f64> = row.iter().map(|x| -x).collect();
        let neg_top = component_words(&cands, &neg, 5).unwrap();
        let bottom: Vec<&str> = all.iter().rev().take(5).map(|w| w.word.as_str()).collect();
        assert_eq!(neg_top.iter().map(|w| w.word.as_str()).collect::<Vec<_>>(), bottom);
    }

    #[test]
    fn restricted_candidates_average_subtokens() {
        let b = random_bundle(&FixtureSpec::default(), 12);
        let cands = CandidateSet::restricted(&b, &["the".into(), "ab".into(), "\u{263a}".into()]).unwrap();
        assert_eq!(cands.words(), &["the", "ab"]);
        let v = b.vocabulary();
        let (a, bb) = (v.id("a").unwrap(), v.id("b").unwrap());
        let e = b.output_embeddings();
        let mut dir = vec![0.0; e.cols()];
        dir[0] = 1.0;
        let s = component_words(&cands, &dir, 2).unwrap();
        let ab = s.iter().find(|w| w.word == "ab").unwrap();
        let expect = (f64::from(e.get(a, 0)) + f64::from(e.get(bb, 0))) / 2.0;
        assert!((ab.projection - expect).abs() < 1e-12);
        assert!(CandidateSet::restricted(&b, &["\u{263a}".into()]).is_err());
    }

    #[test]
    fn group_summary_examples() {
        let c = VarianceCurve { layer: 0, cumulative: vec![0.5, 0.8, 1.0] };
        let s = layer_group_summary(std::slice::from_ref(&c), None, 4, 2);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].cumulative_at_rank, 0.8);
        let c1 = VarianceCurve { layer: 1, ..c.clone() };
        let labels: BTreeMap<usize, Vec<String>> =
            [(0, vec!["semantic".into(), "syntax".into()]), (1, vec!["semantic".into(), "syntax".into()])].into();
        let s = layer_group_summary(&[c, c1], Some(&labels), 4, 2);
        assert_eq!(s[0].cumulative_at_rank, 0.8);
        assert_eq!(s[0].label_percentages["semantic"], 50.0);
        assert_eq!(s[0].label_percentages["syntax"], 50.0);
    }

    #[test]
    fn exports() {
        let b = random_bundle(&FixtureSpec::default(), 13);
        let cands = CandidateSet::vocabulary(&b);
        let params = FfnParams { rank: 4, k: 3, both_signs: true, workers: 2 };
        let layers = analyze_bundle(&b, &cands, &params).unwrap();
        assert_eq!(layers.len(), 2);
        assert!(layers[0].components[0].negative_words.is_some());
        let json: serde_json::Value = serde_json::from_str(&concepts_to_json(&layers[0]).unwrap()).unwrap();
        assert_eq!(json["components"].as_array().unwrap().len(), 4);
        let csv = curves_to_csv(&[layers[0].curve.clone()]);
        assert_eq!(csv.lines().count(), 1 + 16);
    }
}
