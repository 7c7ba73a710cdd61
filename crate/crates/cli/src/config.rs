// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON config file. Keys mirror the long flag names with underscores;
//! a flag given on the command line always wins.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;
use tunelens::annotator::AnnotatorConfig;
use tunelens::attribution::ImportanceMethod;
use tunelens::GradientTarget;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub workers: Option<usize>,
    pub level_count: Option<u32>,
    pub threshold_b: Option<u32>,
    pub p_norm: Option<f64>,
    pub min_response_len: Option<usize>,
    pub method: Option<ImportanceMethod>,
    pub gradient_target: Option<GradientTarget>,
    pub neuron_k: Option<usize>,
    pub top_n: Option<usize>,
    pub reference_words: Option<usize>,
    pub rank: Option<usize>,
    pub concept_k: Option<usize>,
    pub both_signs: Option<bool>,
    pub annotator: Option<AnnotatorConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag, else config value, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
