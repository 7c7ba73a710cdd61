// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word pairs encoded by self-attention heads.
//!
//! Each column `d` of a head's query (key) projection is read as a neuron
//! and described by the `K` vocabulary words whose input embeddings project
//! most strongly onto it. Query and key lists are crossed, and a pair
//! `(w_q, w_k)` survives when the GloVe cosine of its words exceeds both
//! words' thresholds `θ_w = mean + 1.96 · sd` of cosines to a reference set.
//! A head is described by its most frequent surviving pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{EmbeddingTable, ModelBundle, TokenId};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::tensor::{cosine, dot, top_k};

/// Multiplier on the reference standard deviation in word thresholds.
pub const THRESHOLD_Z: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    /// Words per neuron list.
    pub k: usize,
    /// Pairs kept per head.
    pub top_n: usize,
    /// Number of leading GloVe words used as the threshold reference set.
    pub reference_words: usize,
    pub workers: usize,
}

impl Default for AttnParams {
    fn default() -> Self {
        Self {
            k: 100,
            top_n: 100,
            reference_words: 1000,
            workers: 0,
        }
    }
}

/// Canonical word form of a vocabulary token for GloVe lookup: leading
/// word-boundary markers (`▁`, `Ġ`) and surrounding whitespace removed,
/// lowercased.
pub fn token_word(token: &str) -> String {
    token
        .trim()
        .trim_start_matches(['\u{2581}', '\u{120}'])
        .trim()
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronWordLists {
    pub layer: usize,
    pub head: usize,
    pub d: usize,
    pub query_ids: Vec<TokenId>,
    pub key_ids: Vec<TokenId>,
    pub query_words: Vec<String>,
    pub key_words: Vec<String>,
}

fn check_head(bundle: &ModelBundle, layer: usize, head: usize) -> Result<()> {
    let cfg = bundle.config();
    if layer >= cfg.n_layers || head >= cfg.n_heads {
        return Err(Error::OutOfRange(format!(
            "head ({layer}, {head}) outside {} layers x {} heads",
            cfg.n_layers, cfg.n_heads
        )));
    }
    Ok(())
}

/// Scores `E_i[w] · column` for every vocabulary token.
fn column_scores(bundle: &ModelBundle, column: &[f32]) -> Vec<f64> {
    let e = bundle.input_embeddings();
    (0..e.rows()).map(|w| dot(e.row(w), column)).collect()
}

/// Top-`k` query and key words of neuron `d` in head `(layer, head)`.
pub fn neuron_word_lists(bundle: &ModelBundle, layer: usize, head: usize, d: usize, k: usize) -> Result<NeuronWordLists> {
    check_head(bundle, layer, head)?;
    let cfg = bundle.config();
    if d >= cfg.d_head {
        return Err(Error::OutOfRange(format!("neuron {d} >= d_head {}", cfg.d_head)));
    }
    let weights = &bundle.layers()[layer];
    let vocab = bundle.vocabulary();
    let query_ids = top_k(&column_scores(bundle, &weights.wq[head].column(d)), k)?;
    let key_ids = top_k(&column_scores(bundle, &weights.wk[head].column(d)), k)?;
    let words = |ids: &[TokenId]| ids.iter().map(|&i| token_word(vocab.token(i).unwrap_or_default())).collect();
    Ok(NeuronWordLists {
        layer,
        head,
        d,
        query_words: words(&query_ids),
        key_words: words(&key_ids),
        query_ids,
        key_ids,
    })
}

/// `mean + 1.96 · sd` (population) of the cosines between `word` and each
/// reference word. Reference words missing from the table are ignored.
pub fn word_threshold(table: &EmbeddingTable, word: &str, reference_words: &[String]) -> Result<f64> {
    let v = table.get(word).ok_or_else(|| Error::UnknownWord(word.to_string()))?;
    let cosines = reference_words
        .iter()
        .filter_map(|r| table.get(r))
        .map(|r| cosine(v, r))
        .collect::<Result<Vec<f64>>>()?;
    if cosines.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "threshold for `{word}` needs >= 2 reference words in the table, found {}",
            cosines.len()
        )));
    }
    Ok(crate::stats::mean(&cosines) + THRESHOLD_Z * crate::stats::population_sd(&cosines))
}

/// Word thresholds against a fixed reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub reference_words: Vec<String>,
    pub thresholds: BTreeMap<String, f64>,
}

impl ThresholdTable {
    /// Thresholds for every word of `words` present in the table; others are skipped.
    pub fn build<'a>(
        table: &EmbeddingTable,
        words: impl IntoIterator<Item = &'a String>,
        reference_words: &[String],
        workers: usize,
    ) -> Result<Self> {
        let wanted: Vec<&String> = words
            .into_iter()
            .filter(|w| table.contains(w))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let values = map_indexed(workers, wanted.len(), |i| word_threshold(table, wanted[i], reference_words))?;
        Ok(Self {
            reference_words: reference_words.to_vec(),
            thresholds: wanted.into_iter().cloned().zip(values).collect(),
        })
    }

    pub fn get(&self, word: &str) -> Option<f64> {
        self.thresholds.get(word).copied()
    }
}

/// A surviving word pair of one neuron.
pub type WordPair = (String, String);

/// Query x key pairs whose GloVe cosine exceeds both words' thresholds.
/// Words absent from the table or threshold table are skipped; a neuron
/// yields each pair at most once.
pub fn form_pairs(
    query_words: &[String],
    key_words: &[String],
    table: &EmbeddingTable,
    thresholds: &ThresholdTable,
) -> Result<BTreeSet<WordPair>> {
    let mut out = BTreeSet::new();
    for q in query_words {
        let (Some(eq), Some(tq)) = (table.get(q), thresholds.get(q)) else { continue };
        for k in key_words {
            let (Some(ek), Some(tk)) = (table.get(k), thresholds.get(k)) else { continue };
            if cosine(eq, ek)? > tq.max(tk) {
                out.insert((q.clone(), k.clone()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairCount {
    pub query: String,
    pub key: String,
    /// Number of neurons of the head producing the pair.
    pub frequency: usize,
}

/// Ranked word pairs of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPairProfile {
    pub layer: usize,
    pub head: usize,
    pub pairs: Vec<PairCount>,
}

impl HeadPairProfile {
    /// Counts pairs over neurons; keeps the `top_n` most frequent, ties in
    /// lexicographic pair order.
    pub fn from_neurons(layer: usize, head: usize, neurons: &[BTreeSet<WordPair>], top_n: usize) -> Self {
        let mut counts: BTreeMap<&WordPair, usize> = BTreeMap::new();
        for pairs in neurons {
            for p in pairs {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut pairs: Vec<PairCount> = counts
            .into_iter()
            .map(|((q, k), frequency)| PairCount {
                query: q.clone(),
                key: k.clone(),
                frequency,
            })
            .collect();
        // stable sort keeps the lexicographic order among equal frequencies
        pairs.sort_by(|a, b| b.frequency.cmp(&a.frequency));
        pairs.truncate(top_n);
        Self { layer, head, pairs }
    }

    pub fn pair_set(&self) -> BTreeSet<WordPair> {
        self.pairs.iter().map(|p| (p.query.clone(), p.key.clone())).collect()
    }

    /// Pairs with `verb` on either side.
    pub fn verb_count(&self, verb: &str) -> usize {
        self.pairs.iter().filter(|p| p.query == verb || p.key == verb).count()
    }
}

/// A head's profile together with the per-neuron pair sets it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAnalysis {
    pub profile: HeadPairProfile,
    pub neuron_pairs: Vec<BTreeSet<WordPair>>,
}

/// Profile of one head.
pub fn head_profile(
    bundle: &ModelBundle,
    layer: usize,
    head: usize,
    table: &EmbeddingTable,
    thresholds: &ThresholdTable,
    params: &AttnParams,
) -> Result<HeadAnalysis> {
    let neuron_pairs = (0..bundle.config().d_head)
        .map(|d| {
            let lists = neuron_word_lists(bundle, layer, head, d, params.k)?;
            form_pairs(&lists.query_words, &lists.key_words, table, thresholds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeadAnalysis {
        profile: HeadPairProfile::from_neurons(layer, head, &neuron_pairs, params.top_n),
        neuron_pairs,
    })
}

fn reference_set(table: &EmbeddingTable, params: &AttnParams) -> Vec<String> {
    table.most_frequent(params.reference_words).to_vec()
}

/// Every head of `bundle`, in `(layer, head)` order.
pub fn analyze_bundle(bundle: &ModelBundle, table: &EmbeddingTable, params: &AttnParams) -> Result<Vec<HeadAnalysis>> {
    analyze_bundles(&[bundle], table, params).map(|mut v| v.remove(0))
}

/// Analyses several same-vocabulary bundles sharing one threshold table.
pub fn analyze_bundles(
    bundles: &[&ModelBundle],
    table: &EmbeddingTable,
    params: &AttnParams,
) -> Result<Vec<Vec<HeadAnalysis>>> {
    let reference = reference_set(table, params);
    let mut out = Vec::with_capacity(bundles.len());
    let mut thresholds_cache: HashMap<String, f64> = HashMap::new();
    for bundle in bundles {
        let cfg = bundle.config();
        let heads: Vec<(usize, usize)> =
            (0..cfg.n_layers).flat_map(|l| (0..cfg.n_heads).map(move |h| (l, h))).collect();
        let per_head = (0..cfg.d_head).collect::<Vec<_>>();
        let lists = map_indexed(params.workers, heads.len(), |i| {
            let (l, h) = heads[i];
            per_head.iter().map(|&d| neuron_word_lists(bundle, l, h, d, params.k)).collect::<Result<Vec<_>>>()
        })?;
        let words: BTreeSet<&String> = lists
            .iter()
            .flatten()
            .flat_map(|n| n.query_words.iter().chain(&n.key_words))
            .filter(|w| !thresholds_cache.contains_key(*w))
            .collect();
        let fresh = ThresholdTable::build(table, words, &reference, params.workers)?;
        thresholds_cache.extend(fresh.thresholds);
        let thresholds = ThresholdTable {
            reference_words: reference.clone(),
            thresholds: thresholds_cache.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        };
        let analyses = map_indexed(params.workers, heads.len(), |i| {
            let (l, h) = heads[i];
            let neuron_pairs = lists[i]
                .iter()
                .map(|n| form_pairs(&n.query_words, &n.key_words, table, &thresholds))
                .collect::<Result<Vec<_>>>()?;
            Ok(HeadAnalysis {
                profile: HeadPairProfile::from_neurons(l, h, &neuron_pairs, params.top_n),
                neuron_pairs,
            })
        })?;
        out.push(analyses);
    }
    Ok(out)
}

/// Input embedding of a vocabulary word.
fn vocab_embedding<'a>(bundle: &'a ModelBundle, word: &str) -> Result<&'a [f32]> {
    let id = bundle
        .vocabulary()
        .id(word)
        .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
    Ok(bundle.input_embeddings().row(id))
}

/// Bilinear relation `e_a W_q W_kᵀ e_bᵀ` of head `(layer, head)`, evaluated
/// as a matrix product.
pub fn relation_score(bundle: &ModelBundle, layer: usize, head: usize, word_a: &str, word_b: &str) -> Result<f64> {
    check_head(bundle, layer, head)?;
    let (ea, eb) = (vocab_embedding(bundle, word_a)?, vocab_embedding(bundle, word_b)?);
    let w = &bundle.layers()[layer];
    let (wq, wk) = (&w.wq[head], &w.wk[head]);
    // M = W_q W_kᵀ (D x D), then e_a M e_bᵀ
    let d = wq.rows();
    let mut total = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            let m: f64 = wq.row(i).iter().zip(wk.row(j)).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            row += m * f64::from(eb[j]);
        }
        total += f64::from(ea[i]) * row;
    }
    Ok(total)
}

/// Same relation as a sum of per-neuron products `(e_a · q_d)(e_b · k_d)`.
pub fn relation_score_by_neuron(
    bundle: &ModelBundle,
    layer: usize,
    head: usize,
    word_a: &str,
    word_b: &str,
) -> Result<f64> {
    check_head(bundle, layer, head)?;
    let (ea, eb) = (vocab_embedding(bundle, word_a)?, vocab_embedding(bundle, word_b)?);
    let w = &bundle.layers()[layer];
    Ok((0..bundle.config().d_head)
        .map(|d| dot(ea, &w.wq[head].column(d)) * dot(eb, &w.wk[head].column(d)))
        .sum())
}

/// Jaccard overlap of two pair sets; undefined when both are empty.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Result<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return Err(Error::Undefined("both pair sets are empty".into()));
    }
    Ok(a.intersection(b).count() as f64 / union as f64)
}

/// Intersection rate `|A ∩ B| / |A ∪ B|` of two head profiles (ordered pairs).
pub fn intersection_rate(a: &HeadPairProfile, b: &HeadPairProfile) -> Result<f64> {
    jaccard(&a.pair_set(), &b.pair_set())
}

/// Contiguous layer range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerBand {
    pub start: usize,
    pub end: usize,
}

impl LayerBand {
    /// 1-based inclusive label, e.g. `1-4`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.start + 1, self.end)
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..self.end).contains(&layer)
    }
}

/// Bands of `size` layers covering `n_layers` (the last may be shorter).
pub fn layer_bands(n_layers: usize, size: usize) -> Vec<LayerBand> {
    let size = size.max(1);
    (0..n_layers)
        .step_by(size)
        .map(|start| LayerBand {
            start,
            end: (start + size).min(n_layers),
        })
        .collect()
}

/// Head counts for one verb within one band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbBandStats {
    pub verb: String,
    pub band: LayerBand,
    /// Heads where the second bundle has more pairs containing the verb.
    pub heads_more: usize,
    pub heads_less: usize,
    /// `100 · more / (more + less)`; `None` when no head changed.
    pub proportion_more: Option<f64>,
}

/// Per-verb, per-band head statistics between two sets of profiles
/// (`a` = reference, `b` = compared). Heads where the verb count is
/// unchanged are excluded.
pub fn verb_head_stats(
    profiles_a: &[HeadPairProfile],
    profiles_b: &[HeadPairProfile],
    verbs: &[String],
    bands: &[LayerBand],
) -> Result<Vec<VerbBandStats>> {
    if verbs.is_empty() {
        return Err(Error::InvalidArgument("verb list is empty".into()));
    }
    if profiles_a.len() != profiles_b.len()
        || profiles_a.iter().zip(profiles_b).any(|(a, b)| (a.layer, a.head) != (b.layer, b.head))
    {
        return Err(Error::Dimension("profile lists cover different heads".into()));
    }
    let mut out = Vec::with_capacity(verbs.len() * bands.len());
    for verb in verbs {
        let verb = verb.to_lowercase();
        for band in bands {
            let (mut more, mut less) = (0, 0);
            for (a, b) in profiles_a.iter().zip(profiles_b).filter(|(a, _)| band.contains(a.layer)) {
                let (ca, cb) = (a.verb_count(&verb), b.verb_count(&verb));
                if cb > ca {
                    more += 1;
                } else if cb < ca {
                    less += 1;
                }
            }
            out.push(VerbBandStats {
                verb: verb.clone(),
                band: *band,
                heads_more: more,
                heads_less: less,
                proportion_more: (more + less > 0).then(|| 100.0 * more as f64 / (more + less) as f64),
            });
        }
    }
    Ok(out)
}

/// Profile export: one JSON object per head.
pub fn profiles_to_json(profiles: &[HeadPairProfile]) -> Result<String> {
    let heads: Vec<serde_json::Value> = profiles
        .iter()
        .map(|p| {
            serde_json::json!({
                "layer": p.layer,
                "head": p.head,
                "pairs": p.pairs.iter().map(|c| serde_json::json!([c.query, c.key, c.frequency])).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&heads)?)
}
