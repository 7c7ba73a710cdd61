// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded tiny bundles for tests, benchmarks and demos.
//!
//! [`random_bundle`] draws every weight from a `ChaCha8` stream, so the same
//! spec and seed always give a bit-identical bundle. [`planted_attention`]
//! builds a pre-trained/tuned pair whose only difference is one attention
//! head rewired toward a chosen verb, together with a GloVe-style table
//! that agrees with the input embeddings.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{
    Activation, BundleParts, EmbeddingTable, LayerWeights, ModelBundle, ModelConfig, NormKind, NormWeights,
    Vocabulary,
};
use crate::checkpoint::vocab::{BOS_TOKEN, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Shape and scale of a random fixture bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub activation: Activation,
    pub norm_kind: NormKind,
    pub norm_eps: f64,
    /// Standard deviation of input-embedding entries.
    pub embed_scale: f64,
    /// Projection weights use `weight_scale / sqrt(fan_in)` as standard deviation.
    pub weight_scale: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_ffn: 32,
            vocab_size: 48,
            activation: Activation::Silu,
            norm_kind: NormKind::Rmsnorm,
            norm_eps: 1e-6,
            embed_scale: 0.5,
            weight_scale: 1.0,
        }
    }
}

impl FixtureSpec {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_ffn: self.d_ffn,
            vocab_size: self.vocab_size,
            activation: self.activation,
            norm_kind: self.norm_kind,
            attn_scale: None,
            norm_eps: self.norm_eps,
            max_context: 2048,
        }
    }
}

const TOY_WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "is", "you", "that", "it", "for", "on", "are", "with", "as", "be", "this",
    "write", "create", "list", "explain", "give", "story", "poem", "email", "word", "sentence", "answer",
    "question", "summary", "short", "about", "please", "input", "output", "tone", "make", "find", "name",
    "describe", "classify", "translate", "english", "letter", "friend", "happy", "day", "code", "math",
];

/// Toy vocabulary of `size` tokens: the two specials, single characters
/// (space, newline, punctuation, `a`-`z`), then whole words.
pub fn toy_vocabulary(size: usize) -> Result<Vocabulary> {
    let mut tokens = vec![UNK_TOKEN.to_string(), BOS_TOKEN.to_string()];
    let chars = [" ", "\n", ".", ",", "!", "?", "'", ":"]
        .into_iter()
        .map(String::from)
        .chain(('a'..='z').map(String::from));
    tokens.extend(chars.chain(TOY_WORDS.iter().map(|w| w.to_string())));
    let mut i = 0;
    while tokens.len() < size {
        tokens.push(format!("w{i}"));
        i += 1;
    }
    tokens.truncate(size);
    Vocabulary::new(tokens)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
    Matrix::new(rows, cols, data).expect("finite normal samples")
}

fn random_norm(rng: &mut ChaCha8Rng, d: usize, kind: NormKind) -> NormWeights {
    let dist = Normal::new(0.0, 0.1).expect("valid std");
    NormWeights {
        weight: (0..d).map(|_| 1.0 + dist.sample(rng) as f32).collect(),
        bias: match kind {
            NormKind::Layernorm => Some((0..d).map(|_| dist.sample(rng) as f32).collect()),
            NormKind::Rmsnorm => None,
        },
    }
}

/// Deterministic random bundle.
pub fn random_bundle(spec: &FixtureSpec, seed: u64) -> ModelBundle {
    try_random_bundle(spec, seed).expect("fixture spec must describe a valid bundle")
}

pub fn try_random_bundle(spec: &FixtureSpec, seed: u64) -> Result<ModelBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = spec.config();
    let (d, dh, h, f, v) = (spec.d_model, spec.d_head, spec.n_heads, spec.d_ffn, spec.vocab_size);
    let proj = spec.weight_scale / (d as f64).sqrt();
    let input_embeddings = normal_matrix(&mut rng, v, d, spec.embed_scale);
    let output_embeddings = normal_matrix(&mut rng, v, d, 1.0 / (d as f64).sqrt());
    let layers = (0..spec.n_layers)
        .map(|_| LayerWeights {
            wq: (0..h).map(|_| normal_matrix(&mut rng, d, dh, proj)).collect(),
            wk: (0..h).map(|_| normal_matrix(&mut rng, d, dh, proj)).collect(),
            wv: (0..h).map(|_| normal_matrix(&mut rng, d, dh, proj)).collect(),
            wo: normal_matrix(&mut rng, h * dh, d, spec.weight_scale / ((h * dh) as f64).sqrt()),
            wu: normal_matrix(&mut rng, f, d, proj),
            wp: normal_matrix(&mut rng, f, d, spec.weight_scale / (f as f64).sqrt()),
            norm1: random_norm(&mut rng, d, spec.norm_kind),
            norm2: random_norm(&mut rng, d, spec.norm_kind),
        })
        .collect();
    let final_norm = random_norm(&mut rng, d, spec.norm_kind);
    ModelBundle::from_parts(BundleParts {
        config,
        input_embeddings,
        output_embeddings,
        layers,
        final_norm,
        vocabulary: toy_vocabulary(v)?,
    })
}

// ---------------------------------------------------------------------------
// Planted attention scenario
// ---------------------------------------------------------------------------

/// Verbs used as the general (control) group in the planted scenario.
pub const CONTROL_VERBS: [&str; 30] = [
    "run", "eat", "walk", "talk", "sing", "jump", "read", "cook", "swim", "draw", "play", "sleep", "drive",
    "build", "paint", "climb", "dance", "fly", "grow", "hunt", "laugh", "listen", "move", "open", "pull",
    "push", "ride", "sail", "shout", "throw",
];

/// Pre-trained/tuned bundle pair with one rewired head.
#[derive(Debug, Clone)]
pub struct PlantedScenario {
    pub pretrained: ModelBundle,
    pub tuned: ModelBundle,
    pub glove: EmbeddingTable,
    pub planted_verb: String,
    pub control_verbs: Vec<String>,
    pub planted_layer: usize,
    pub planted_head: usize,
    /// Top-K per neuron that makes each neuron's list exactly one cluster.
    pub k: usize,
}

/// Knobs for [`planted_attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Words per verb cluster, verb included.
    pub cluster_size: usize,
    pub planted_layer: usize,
    pub planted_head: usize,
    pub noise: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_layers: 16,
            n_heads: 2,
            d_model: 64,
            d_head: 8,
            cluster_size: 4,
            planted_layer: 10,
            planted_head: 1,
            noise: 0.03,
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let dist = Normal::new(0.0, 1.0).expect("valid std");
    let v: Vec<f64> = (0..d).map(|_| dist.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn set_column(m: &mut Matrix, col: usize, values: &[f32]) {
    for (r, &v) in values.iter().enumerate() {
        m.set(r, col, v).expect("finite column");
    }
}

/// Builds the planted pair. Every head of the pre-trained model has half of
/// its neurons aligned with distinct control-verb clusters and half random.
/// In the tuned model the planted head swaps one random neuron for the
/// planted verb's cluster and two of its control clusters for two fresh ones.
pub fn planted_attention(spec: &PlantedSpec, seed: u64) -> Result<PlantedScenario> {
    let half = spec.d_head / 2;
    if spec.d_head < 4 || half + 2 > CONTROL_VERBS.len() || spec.planted_layer >= spec.n_layers || spec.planted_head >= spec.n_heads {
        return Err(Error::InvalidArgument("planted scenario spec out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted_verb = "write".to_string();
    let verbs: Vec<String> = std::iter::once(planted_verb.clone())
        .chain(CONTROL_VERBS.iter().map(|v| v.to_string()))
        .collect();

    let d = spec.d_model;
    let mut tokens = vec![UNK_TOKEN.to_string(), BOS_TOKEN.to_string()];
    let mut directions = Vec::with_capacity(verbs.len());
    let mut glove_entries = Vec::new();
    let mut rows: Vec<Vec<f32>> = vec![unit_vector(&mut rng, d), unit_vector(&mut rng, d)];
    let noise = Normal::new(0.0, spec.noise).expect("valid std");
    for verb in &verbs {
        let dir = unit_vector(&mut rng, d);
        for j in 0..spec.cluster_size {
            let word = if j == 0 { verb.clone() } else { format!("{verb}-obj{j}") };
            let vec: Vec<f32> = dir.iter().map(|&x| x + noise.sample(&mut rng) as f32).collect();
            tokens.push(word.clone());
            glove_entries.push((word, vec.clone()));
            rows.push(vec);
        }
        directions.push(dir);
    }
    let vocab_size = tokens.len();
    let config = ModelConfig {
        n_layers: spec.n_layers,
        n_heads: spec.n_heads,
        d_model: d,
        d_head: spec.d_head,
        d_ffn: 16,
        vocab_size,
        activation: Activation::Silu,
        norm_kind: NormKind::Rmsnorm,
        attn_scale: None,
        norm_eps: 1e-6,
        max_context: 2048,
    };
    let input_embeddings = Matrix::from_rows(&rows)?;
    let output_embeddings = normal_matrix(&mut rng, vocab_size, d, 1.0 / (d as f64).sqrt());

    let mut layers = Vec::with_capacity(spec.n_layers);
    let mut planted_pre: Vec<usize> = Vec::new();
    for layer in 0..spec.n_layers {
        let mut wq = Vec::with_capacity(spec.n_heads);
        let mut wk = Vec::with_capacity(spec.n_heads);
        for head in 0..spec.n_heads {
            let mut q = Matrix::zeros(d, spec.d_head);
            let mut k = Matrix::zeros(d, spec.d_head);
            // distinct control clusters (index into `verbs`, skipping the planted verb)
            let mut pool: Vec<usize> = (1..verbs.len()).collect();
            let mut chosen = Vec::with_capacity(half);
            for _ in 0..half {
                let at = rng.random_range(0..pool.len());
                chosen.push(pool.swap_remove(at));
            }
            for (col, &cluster) in chosen.iter().enumerate() {
                set_column(&mut q, col, &directions[cluster]);
                set_column(&mut k, col, &directions[cluster]);
            }
            for col in half..spec.d_head {
                set_column(&mut q, col, &unit_vector(&mut rng, d));
                set_column(&mut k, col, &unit_vector(&mut rng, d));
            }
            if layer == spec.planted_layer && head == spec.planted_head {
                planted_pre = chosen;
            }
            wq.push(q);
            wk.push(k);
        }
        let proj = 1.0 / (d as f64).sqrt();
        layers.push(LayerWeights {
            wq,
            wk,
            wv: (0..spec.n_heads).map(|_| normal_matrix(&mut rng, d, spec.d_head, proj)).collect(),
            wo: normal_matrix(&mut rng, spec.n_heads * spec.d_head, d, 1.0 / ((spec.n_heads * spec.d_head) as f64).sqrt()),
            wu: normal_matrix(&mut rng, 16, d, proj),
            wp: normal_matrix(&mut rng, 16, d, 0.25),
            norm1: NormWeights::ones(d),
            norm2: NormWeights::ones(d),
        });
    }
    let vocabulary = Vocabulary::new(tokens)?;
    let pre_parts = BundleParts {
        config,
        input_embeddings,
        output_embeddings,
        layers,
        final_norm: NormWeights::ones(d),
        vocabulary,
    };

    let mut tuned_parts = pre_parts.clone();
    {
        let layer = &mut tuned_parts.layers[spec.planted_layer];
        let (q, k) = (&mut layer.wq[spec.planted_head], &mut layer.wk[spec.planted_head]);
        let fresh: Vec<usize> = (1..verbs.len()).filter(|c| !planted_pre.contains(c)).take(2).collect();
        // the last two control neurons move to fresh clusters
        for (offset, &cluster) in fresh.iter().enumerate() {
            let col = half - 1 - offset;
            set_column(q, col, &directions[cluster]);
            set_column(k, col, &directions[cluster]);
        }
        // first random neuron now carries the planted verb
        set_column(q, half, &directions[0]);
        set_column(k, half, &directions[0]);
    }

    Ok(PlantedScenario {
        pretrained: ModelBundle::from_parts(pre_parts)?,
        tuned: ModelBundle::from_parts(tuned_parts)?,
        glove: EmbeddingTable::from_entries(glove_entries)?,
        planted_verb,
        control_verbs: CONTROL_VERBS.iter().map(|v| v.to_string()).collect(),
        planted_layer: spec.planted_layer,
        planted_head: spec.planted_head,
        k: spec.cluster_size,
    })
}

impl PlantedScenario {
    /// Writes `pretrained/`, `tuned/`, `glove.txt`, `instruction_verbs.txt`
    /// and `general_verbs.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.pretrained.save(&dir.join("pretrained"))?;
        self.tuned.save(&dir.join("tuned"))?;
        self.glove.save(&dir.join("glove.txt"))?;
        let write = |name: &str, words: &[String]| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, words.join("\n") + "\n").map_err(|e| Error::io(&p, e))
        };
        write("instruction_verbs.txt", std::slice::from_ref(&self.planted_verb))?;
        write("general_verbs.txt", &self.control_verbs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bundle() {
        let spec = FixtureSpec::default();
        assert_eq!(random_bundle(&spec, 9), random_bundle(&spec, 9));
        assert_ne!(random_bundle(&spec, 9).digest(), random_bundle(&spec, 10).digest());
    }

    #[test]
    fn toy_vocab_sizes() {
        assert_eq!(toy_vocabulary(20).unwrap().len(), 20);
        let big = toy_vocabulary(200).unwrap();
        assert_eq!(big.len(), 200);
        assert_eq!(big.token(0), Some(UNK_TOKEN));
    }

    #[test]
    fn planted_pair_differs_in_one_head() {
        let s = planted_attention(&PlantedSpec::default(), 5).unwrap();
        let (a, b) = (s.pretrained.layers(), s.tuned.layers());
        let mut diffs = Vec::new();
        for l in 0..a.len() {
            for h in 0..a[l].wq.len() {
                if a[l].wq[h] != b[l].wq[h] || a[l].wk[h] != b[l].wk[h] {
                    diffs.push((l, h));
                }
            }
            assert_eq!(a[l].wv, b[l].wv);
        }
        assert_eq!(diffs, vec![(s.planted_layer, s.planted_head)]);
        assert!(s.glove.contains("write"));
    }
}
