// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpretability toolbox for comparing a pre-trained decoder-only
//! transformer with its instruction-tuned counterpart.
//!
//! - [`attribution`]: prompt-to-response importance maps and density statistics
//! - [`attn_lens`]: word pairs encoded by self-attention query/key neurons
//! - [`ffn_lens`]: principal directions of feed-forward key vectors projected onto words
//! - [`annotator`]: chat-model labelling of concepts with fixed prompt templates
//! - [`report`]: side-by-side diff reports and heatmap rendering
//!
//! Everything runs on CPU with a small native transformer ([`runtime`])
//! loaded from a tensor container ([`checkpoint`]).

pub mod annotator;
pub mod attn_lens;
pub mod attribution;
pub mod checkpoint;
pub mod error;
pub mod ffn_lens;
pub mod fixture;
pub mod parallel;
pub mod report;
pub mod runtime;
pub mod stats;
pub mod tensor;

pub use checkpoint::{
    load_bundle, load_bundle_dir, Activation, EmbeddingTable, ModelBundle, ModelConfig, NormKind, TokenId,
    Vocabulary, WordListSet,
};
pub use error::{Error, Result};
pub use runtime::{GradientTarget, Occlusion};
pub use tensor::Matrix;
