// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model bundles: checkpoint tensors, configuration and vocabulary.
//!
//! A bundle on disk is three files: a tensor container (see [`container`]),
//! a JSON config and a one-token-per-line vocabulary. Tensor names:
//!
//! ```text
//! embed.input               [vocab, d_model]
//! embed.output              [vocab, d_model]
//! layers.{i}.attn.wq|wk|wv  [n_heads, d_model, d_head]
//! layers.{i}.attn.wo        [n_heads * d_head, d_model]
//! layers.{i}.ffn.wu|wp      [d_ffn, d_model]
//! layers.{i}.norm1.weight   [d_model]   (+ optional .bias)
//! layers.{i}.norm2.weight   [d_model]   (+ optional .bias)
//! final_norm.weight         [d_model]   (+ optional .bias)
//! ```

pub mod container;
pub mod glove;
pub mod vocab;
pub mod wordlist;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use container::RawTensor;
pub use glove::{load_glove, EmbeddingTable};
pub use vocab::{TokenId, TokenSpan, Vocabulary};
pub use wordlist::{load_word_list, WordListSet};

/// FFN non-linearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
    #[default]
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Layernorm,
    #[default]
    Rmsnorm,
}

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_max_context() -> usize {
    2048
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub norm_kind: NormKind,
    /// Attention logits are divided by this; `sqrt(d_head)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_scale: Option<f64>,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
}

impl ModelConfig {
    pub fn attn_scale(&self) -> f64 {
        self.attn_scale.unwrap_or((self.d_head as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("config `{name}` must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidArgument("vocab_size must be at least 2".into()));
        }
        let scale = self.attn_scale();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("attn_scale must be positive, got {scale}")));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::InvalidArgument("norm_eps must be finite and positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scale and optional shift of a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights {
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl NormWeights {
    pub fn ones(d: usize) -> Self {
        Self {
            weight: vec![1.0; d],
            bias: None,
        }
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Per head, `d_model x d_head`.
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// `(n_heads * d_head) x d_model`
    pub wo: Matrix,
    /// `d_ffn x d_model`; the FFN computes `act(x wu^T) wp`.
    pub wu: Matrix,
    pub wp: Matrix,
    pub norm1: NormWeights,
    pub norm2: NormWeights,
}

/// Unvalidated bundle contents; turn into a [`ModelBundle`] with [`ModelBundle::from_parts`].
#[derive(Debug, Clone, PartialEq)]
pub struct BundleParts {
    pub config: ModelConfig,
    pub input_embeddings: Matrix,
    pub output_embeddings: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormWeights,
    pub vocabulary: Vocabulary,
}

/// A validated, immutable model checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    parts: BundleParts,
    digest: String,
}

fn check_shape(name: &str, found: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if found != expected {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: vec![expected.0, expected.1],
            found: vec![found.0, found.1],
        });
    }
    Ok(())
}

fn check_norm(name: &str, norm: &NormWeights, d: usize) -> Result<()> {
    let bad = |len: usize| Error::ShapeMismatch {
        name: name.to_string(),
        expected: vec![d],
        found: vec![len],
    };
    if norm.weight.len() != d {
        return Err(bad(norm.weight.len()));
    }
    if let Some(b) = &norm.bias {
        if b.len() != d {
            return Err(bad(b.len()));
        }
    }
    let finite = norm.weight.iter().chain(norm.bias.iter().flatten()).all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

impl ModelBundle {
    /// Validates every shape against the config and seals the bundle.
    pub fn from_parts(parts: BundleParts) -> Result<Self> {
        let c = &parts.config;
        c.validate()?;
        let (v, d) = (c.vocab_size, c.d_model);
        check_shape("embed.input", parts.input_embeddings.shape(), (v, d))?;
        check_shape("embed.output", parts.output_embeddings.shape(), (v, d))?;
        if parts.vocabulary.len() != v {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} tokens, config says {v}",
                parts.vocabulary.len()
            )));
        }
        if parts.layers.len() != c.n_layers {
            return Err(Error::InvalidArgument(format!(
                "{} layers present, config says {}",
                parts.layers.len(),
                c.n_layers
            )));
        }
        for (i, layer) in parts.layers.iter().enumerate() {
            for (kind, heads) in [("wq", &layer.wq), ("wk", &layer.wk), ("wv", &layer.wv)] {
                let name = format!("layers.{i}.attn.{kind}");
                if heads.len() != c.n_heads {
                    return Err(Error::ShapeMismatch {
                        name,
                        expected: vec![c.n_heads, d, c.d_head],
                        found: vec![heads.len()],
                    });
                }
                for m in heads {
                    if m.shape() != (d, c.d_head) {
                        return Err(Error::ShapeMismatch {
                            name,
                            expected: vec![c.n_heads, d, c.d_head],
                            found: vec![c.n_heads, m.rows(), m.cols()],
                        });
                    }
                }
            }
            check_shape(&format!("layers.{i}.attn.wo"), layer.wo.shape(), (c.n_heads * c.d_head, d))?;
            check_shape(&format!("layers.{i}.ffn.wu"), layer.wu.shape(), (c.d_ffn, d))?;
            check_shape(&format!("layers.{i}.ffn.wp"), layer.wp.shape(), (c.d_ffn, d))?;
            check_norm(&format!("layers.{i}.norm1"), &layer.norm1, d)?;
            check_norm(&format!("layers.{i}.norm2"), &layer.norm2, d)?;
        }
        check_norm("final_norm", &parts.final_norm, d)?;
        let digest = digest_tensors(&parts.config, &to_tensors(&parts), &parts.vocabulary)?;
        Ok(Self { parts, digest })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.parts.config
    }

    pub fn input_embeddings(&self) -> &Matrix {
        &self.parts.input_embeddings
    }

    pub fn output_embeddings(&self) -> &Matrix {
        &self.parts.output_embeddings
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.parts.layers
    }

    pub fn layer(&self, i: usize) -> Result<&LayerWeights> {
        self.parts
            .layers
            .get(i)
            .ok_or_else(|| Error::OutOfRange(format!("layer {i} of {}", self.parts.layers.len())))
    }

    pub fn final_norm(&self) -> &NormWeights {
        &self.parts.final_norm
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.parts.vocabulary
    }

    /// SHA-256 over config, tensors (name order) and vocabulary.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn parts(&self) -> &BundleParts {
        &self.parts
    }

    pub fn into_parts(self) -> BundleParts {
        self.parts
    }

    /// Named tensors in container layout.
    pub fn tensors(&self) -> BTreeMap<String, RawTensor> {
        to_tensors(&self.parts)
    }

    /// Writes `model.tensors`, `config.json` and `vocab.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<BundlePaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = BundlePaths::in_dir(dir);
        container::write(&paths.container, &self.tensors())?;
        let cfg = serde_json::to_string_pretty(&self.parts.config)?;
        std::fs::write(&paths.config, cfg + "\n").map_err(|e| Error::io(&paths.config, e))?;
        self.parts.vocabulary.save(&paths.vocab)?;
        Ok(paths)
    }
}

/// File locations of a bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundlePaths {
    pub container: std::path::PathBuf,
    pub config: std::path::PathBuf,
    pub vocab: std::path::PathBuf,
}

impl BundlePaths {
    /// Conventional names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            container: dir.join("model.tensors"),
            config: dir.join("config.json"),
            vocab: dir.join("vocab.txt"),
        }
    }
}

fn matrix_tensor(m: &Matrix) -> RawTensor {
    RawTensor::new(vec![m.rows(), m.cols()], m.data().to_vec())
}

fn insert_norm(out: &mut BTreeMap<String, RawTensor>, prefix: &str, n: &NormWeights) {
    out.insert(
        format!("{prefix}.weight"),
        RawTensor::new(vec![n.weight.len()], n.weight.clone()),
    );
    if let Some(b) = &n.bias {
        out.insert(format!("{prefix}.bias"), RawTensor::new(vec![b.len()], b.clone()));
    }
}

fn to_tensors(p: &BundleParts) -> BTreeMap<String, RawTensor> {
    let mut out = BTreeMap::new();
    out.insert("embed.input".into(), matrix_tensor(&p.input_embeddings));
    out.insert("embed.output".into(), matrix_tensor(&p.output_embeddings));
    for (i, layer) in p.layers.iter().enumerate() {
        for (kind, heads) in [("wq", &layer.wq), ("wk", &layer.wk), ("wv", &layer.wv)] {
            let (rows, cols) = heads.first().map_or((0, 0), Matrix::shape);
            let data: Vec<f32> = heads.iter().flat_map(|m| m.data().iter().copied()).collect();
            out.insert(
                format!("layers.{i}.attn.{kind}"),
                RawTensor::new(vec![heads.len(), rows, cols], data),
            );
        }
        out.insert(format!("layers.{i}.attn.wo"), matrix_tensor(&layer.wo));
        out.insert(format!("layers.{i}.ffn.wu"), matrix_tensor(&layer.wu));
        out.insert(format!("layers.{i}.ffn.wp"), matrix_tensor(&layer.wp));
        insert_norm(&mut out, &format!("layers.{i}.norm1"), &layer.norm1);
        insert_norm(&mut out, &format!("layers.{i}.norm2"), &layer.norm2);
    }
    insert_norm(&mut out, "final_norm", &p.final_norm);
    out
}

fn digest_tensors(
    config: &ModelConfig,
    tensors: &BTreeMap<String, RawTensor>,
    vocab: &Vocabulary,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for s in &t.shape {
            h.update((*s as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    for tok in vocab.tokens() {
        h.update(tok.as_bytes());
        h.update([0u8]);
    }
    Ok(hex::encode(h.finalize()))
}

struct TensorSource {
    tensors: BTreeMap<String, RawTensor>,
}

impl TensorSource {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape,
            });
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(t.data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.take(name, &[rows, cols])?)
    }

    fn heads(&mut self, name: &str, h: usize, rows: usize, cols: usize) -> Result<Vec<Matrix>> {
        let data = self.take(name, &[h, rows, cols])?;
        data.chunks_exact(rows * cols)
            .map(|c| Matrix::new(rows, cols, c.to_vec()))
            .collect()
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormWeights> {
        let weight = self.take(&format!("{prefix}.weight"), &[d])?;
        let bias_name = format!("{prefix}.bias");
        let bias = if self.tensors.contains_key(&bias_name) {
            Some(self.take(&bias_name, &[d])?)
        } else {
            None
        };
        Ok(NormWeights { weight, bias })
    }
}

/// Assembles a bundle from named tensors, rejecting missing, misshapen or unexpected tensors.
pub fn bundle_from_tensors(
    config: ModelConfig,
    tensors: BTreeMap<String, RawTensor>,
    vocabulary: Vocabulary,
) -> Result<ModelBundle> {
    config.validate()?;
    let c = config.clone();
    let mut src = TensorSource { tensors };
    let input_embeddings = src.matrix("embed.input", c.vocab_size, c.d_model)?;
    let output_embeddings = src.matrix("embed.output", c.vocab_size, c.d_model)?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for i in 0..c.n_layers {
        layers.push(LayerWeights {
            wq: src.heads(&format!("layers.{i}.attn.wq"), c.n_heads, c.d_model, c.d_head)?,
            wk: src.heads(&format!("layers.{i}.attn.wk"), c.n_heads, c.d_model, c.d_head)?,
            wv: src.heads(&format!("layers.{i}.attn.wv"), c.n_heads, c.d_model, c.d_head)?,
            wo: src.matrix(&format!("layers.{i}.attn.wo"), c.n_heads * c.d_head, c.d_model)?,
            wu: src.matrix(&format!("layers.{i}.ffn.wu"), c.d_ffn, c.d_model)?,
            wp: src.matrix(&format!("layers.{i}.ffn.wp"), c.d_ffn, c.d_model)?,
            norm1: src.norm(&format!("layers.{i}.norm1"), c.d_model)?,
            norm2: src.norm(&format!("layers.{i}.norm2"), c.d_model)?,
        });
    }
    let final_norm = src.norm("final_norm", c.d_model)?;
    if let Some(extra) = src.tensors.keys().next() {
        return Err(Error::MalformedHeader(format!("unexpected tensor `{extra}`")));
    }
    ModelBundle::from_parts(BundleParts {
        config,
        input_embeddings,
        output_embeddings,
        layers,
        final_norm,
        vocabulary,
    })
}

/// Loads and validates a bundle from its three files.
pub fn load_bundle(container_path: &Path, config_path: &Path, vocab_path: &Path) -> Result<ModelBundle> {
    let config = ModelConfig::load(config_path)?;
    let vocabulary = Vocabulary::load(vocab_path)?;
    let tensors = container::read(container_path)?;
    bundle_from_tensors(config, tensors, vocabulary)
}

/// Loads `model.tensors`, `config.json` and `vocab.txt` from one directory.
pub fn load_bundle_dir(dir: &Path) -> Result<ModelBundle> {
    let p = BundlePaths::in_dir(dir);
    load_bundle(&p.container, &p.config, &p.vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{random_bundle, FixtureSpec};

    #[test]
    fn save_load_is_bit_exact() {
        let b = random_bundle(&FixtureSpec::default(), 1);
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let again = load_bundle_dir(dir.path()).unwrap();
        assert_eq!(again, b);
        assert_eq!(again.digest(), b.digest());
        let twice = load_bundle_dir(dir.path()).unwrap();
        assert_eq!(twice, again);
    }

    #[test]
    fn transposed_wq_is_shape_mismatch() {
        let spec = FixtureSpec {
            d_model: 8,
            d_head: 4,
            ..FixtureSpec::default()
        };
        let b = random_bundle(&spec, 2);
        let mut tensors = b.tensors();
        let wq = tensors.get_mut("layers.0.attn.wq").unwrap();
        wq.shape = vec![wq.shape[0], wq.shape[2], wq.shape[1]];
        let err = bundle_from_tensors(b.config().clone(), tensors, b.vocabulary().clone()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn missing_and_non_finite_tensors() {
        let b = random_bundle(&FixtureSpec::default(), 3);
        let mut tensors = b.tensors();
        tensors.remove("layers.1.ffn.wp");
        assert!(matches!(
            bundle_from_tensors(b.config().clone(), tensors, b.vocabulary().clone()),
            Err(Error::MissingTensor(n)) if n == "layers.1.ffn.wp"
        ));

        let mut tensors = b.tensors();
        tensors.get_mut("embed.output").unwrap().data[3] = f32::NAN;
        assert!(matches!(
            bundle_from_tensors(b.config().clone(), tensors, b.vocabulary().clone()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn truncated_container_is_malformed() {
        let b = random_bundle(&FixtureSpec::default(), 4);
        let dir = tempfile::tempdir().unwrap();
        let paths = b.save(dir.path()).unwrap();
        let bytes = std::fs::read(&paths.container).unwrap();
        std::fs::write(&paths.container, &bytes[..bytes.len() / 3]).unwrap();
        assert!(matches!(
            load_bundle(&paths.container, &paths.config, &paths.vocab),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn config_defaults() {
        let cfg: ModelConfig = serde_json::from_str(
            r#"{"n_layers":1,"n_heads":2,"d_model":8,"d_head":4,"d_ffn":16,"vocab_size":10}"#,
        )
        .unwrap();
        assert_eq!(cfg.attn_scale(), 2.0);
        assert_eq!(cfg.activation, Activation::Silu);
        assert_eq!(cfg.max_context, 2048);
        let bad = ModelConfig { d_head: 0, ..cfg };
        assert!(bad.validate().is_err());
    }
}
