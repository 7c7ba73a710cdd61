// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-checkpoint diff reports and salient-map rendering.
//!
//! A [`DiffReport`] is a versioned JSON document: metadata identifying both
//! bundles, then named sections of `{label, series, value, sd, p_value, n}`
//! rows together with the hyperparameters that produced them. Section and
//! hyperparameter maps are ordered, so a report is a pure function of its
//! inputs and serializes to identical bytes on every run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::annotator::{aggregate_distribution, ConceptAnnotation};
use crate::attn_lens::{analyze_bundles, jaccard, layer_bands, verb_head_stats, AttnParams, HeadAnalysis};
use crate::attribution::{
    group_compare, instance_score, segment_profile, sentence_boundaries, AnnotatedInstance, AttributionParams,
    SalientMap,
};
use crate::checkpoint::{EmbeddingTable, ModelBundle, WordListSet};
use crate::error::{Error, Result};
use crate::ffn_lens::{analyze_bundle as ffn_analyze, layer_group_summary, CandidateSet, FfnParams, LayerConcepts};
use crate::parallel::map_indexed;
use crate::stats::{summarize, Alternative};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Layers per band for intersection-rate curves and layer profiles.
pub const CURVE_BAND: usize = 4;
/// Layers per band for verb tables.
pub const VERB_BAND: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub digest: String,
    pub config_digest: String,
}

impl BundleInfo {
    pub fn of(bundle: &ModelBundle) -> Self {
        let config = serde_json::to_string(bundle.config()).expect("config serializes");
        Self {
            digest: bundle.digest().to_string(),
            config_digest: hex::encode(Sha256::digest(config.as_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub schema_version: u32,
    pub tool_version: String,
    /// Reference (pre-trained) bundle.
    pub bundle_a: BundleInfo,
    /// Compared (tuned) bundle.
    pub bundle_b: BundleInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub series: String,
    /// `null` when undefined (e.g. no head changed in a band).
    pub value: Option<f64>,
    pub sd: Option<f64>,
    pub p_value: Option<f64>,
    pub n: usize,
}

impl ReportRow {
    fn new(label: impl Into<String>, series: impl Into<String>, value: Option<f64>, sd: Option<f64>, n: usize) -> Self {
        Self {
            label: label.into(),
            series: series.into(),
            value,
            sd,
            p_value: None,
            n,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub hyperparameters: BTreeMap<String, Value>,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Section {
    fn with_params(params: Value) -> Self {
        let hyperparameters = match params {
            Value::Object(m) => m.into_iter().collect(),
            other => [("value".to_string(), other)].into(),
        };
        Self {
            hyperparameters,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub metadata: ReportMetadata,
    pub sections: BTreeMap<String, Section>,
}

impl DiffReport {
    pub fn new(a: &ModelBundle, b: &ModelBundle) -> Self {
        Self {
            metadata: ReportMetadata {
                schema_version: SCHEMA_VERSION,
                tool_version: TOOL_VERSION.to_string(),
                bundle_a: BundleInfo::of(a),
                bundle_b: BundleInfo::of(b),
            },
            sections: BTreeMap::new(),
        }
    }

    pub fn extend(&mut self, sections: impl IntoIterator<Item = (String, Section)>) {
        self.sections.extend(sections);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parses and validates a report.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Schema checks beyond the serde shape.
    pub fn validate(&self) -> Result<()> {
        let m = &self.metadata;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported schema version {}", m.schema_version)));
        }
        let is_digest = |s: &str| s.len() == 64 && s.bytes().all(|c| c.is_ascii_hexdigit());
        for info in [&m.bundle_a, &m.bundle_b] {
            if !is_digest(&info.digest) || !is_digest(&info.config_digest) {
                return Err(Error::InvalidArgument("bundle digests must be 64 hex characters".into()));
            }
        }
        for (name, s) in &self.sections {
            if s.hyperparameters.is_empty() {
                return Err(Error::InvalidArgument(format!("section `{name}` lists no hyperparameters")));
            }
            let bad = s.rows.iter().any(|r| {
                [r.value, r.sd, r.p_value].iter().flatten().any(|v| !v.is_finite())
                    || r.p_value.is_some_and(|p| !(0.0..=1.0).contains(&p))
            });
            if bad {
                return Err(Error::InvalidArgument(format!("section `{name}` has an invalid number")));
            }
        }
        Ok(())
    }

    /// Flat TSV: `section label series value sd p_value n`, empty cells for nulls.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("section\tlabel\tseries\tvalue\tsd\tp_value\tn\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (name, s) in &self.sections {
            for r in &s.rows {
                writeln!(
                    out,
                    "{name}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.label,
                    r.series,
                    cell(r.value),
                    cell(r.sd),
                    cell(r.p_value),
                    r.n
                )
                .expect("write to string");
            }
        }
        out
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }
}

fn summary_row(label: &str, series: &str, values: &[f64]) -> ReportRow {
    if values.is_empty() {
        return ReportRow::new(label, series, None, None, 0);
    }
    let s = summarize(values);
    ReportRow::new(label, series, Some(s.mean), Some(s.sd), s.n)
}

/// Two rows (`a`, `b`) with the comparison's p-value on the `b` row.
fn paired_rows(label: &str, a: &[f64], b: &[f64], alternative: Alternative) -> [ReportRow; 2] {
    let ra = summary_row(label, "a", a);
    let mut rb = summary_row(label, "b", b);
    rb.p_value = group_compare(b, a, alternative).ok().map(|r| r.p_value);
    [ra, rb]
}

// ---------------------------------------------------------------------------
// Density
// ---------------------------------------------------------------------------

/// Score of one instance under one bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub dataset: String,
    pub followed: bool,
    /// `None` when excluded (short response or no density mass).
    pub score: Option<f64>,
    pub segment_shares: Option<[f64; 4]>,
}

/// Scores every instance on `bundle`, tokenizing with the bundle's vocabulary.
pub fn score_instances(
    bundle: &ModelBundle,
    instances: &[AnnotatedInstance],
    params: &AttributionParams,
) -> Result<Vec<InstanceResult>> {
    let inner = AttributionParams {
        workers: 1,
        ..params.clone()
    };
    let vocab = bundle.vocabulary();
    map_indexed(params.workers, instances.len(), |i| {
        let inst = &instances[i];
        let prompt = vocab.tokenize(&inst.prompt);
        let response = vocab.tokenize(&inst.response);
        let base = InstanceResult {
            dataset: inst.dataset.clone(),
            followed: inst.followed,
            score: None,
            segment_shares: None,
        };
        if prompt.is_empty() || response.len() < params.min_response_len.max(1) {
            return Ok(base);
        }
        let map = SalientMap::compute(bundle, &prompt, &response, &inner)?;
        let score = match instance_score(&map, &inst.instruction_tokens(vocab), params.p_norm, params.min_response_len) {
            Ok(s) => Some(s),
            Err(Error::Excluded(_)) => None,
            Err(e) => return Err(e),
        };
        let densities = map.densities(params.p_norm).raw_density;
        let seg = segment_profile(&densities, &sentence_boundaries(vocab, &inst.prompt))?;
        Ok(InstanceResult {
            score,
            segment_shares: (seg.sentences > 0).then_some(seg.shares),
            ..base
        })
    })
}

fn attribution_params_json(params: &AttributionParams) -> Value {
    json!({
        "level_count": params.level_count,
        "threshold_b": params.threshold_b,
        "p_norm": params.p_norm,
        "min_response_len": params.min_response_len,
        "method": params.method,
        "gradient_target": params.gradient_target,
    })
}

/// Density sections from precomputed per-instance results.
pub fn density_sections(
    results_a: &[InstanceResult],
    results_b: &[InstanceResult],
    params: &AttributionParams,
) -> Result<Vec<(String, Section)>> {
    let scored = |r: &[InstanceResult]| r.iter().filter(|x| x.score.is_some()).count();
    if scored(results_a) == 0 && scored(results_b) == 0 {
        return Err(Error::EmptySection("every instance was excluded".into()));
    }
    let base = attribution_params_json(params);

    // per dataset, b > a
    let mut by_dataset = Section::with_params(base.clone());
    by_dataset.hyperparameters.insert("alternative".into(), json!("b_greater"));
    let datasets: std::collections::BTreeSet<&str> =
        results_a.iter().chain(results_b).map(|r| r.dataset.as_str()).collect();
    for ds in datasets {
        let pick = |r: &[InstanceResult]| -> Vec<f64> {
            r.iter().filter(|x| x.dataset == ds).filter_map(|x| x.score).collect()
        };
        by_dataset.rows.extend(paired_rows(ds, &pick(results_a), &pick(results_b), Alternative::Greater));
    }

    // followed > unfollowed within each bundle
    let mut followed = Section::with_params(base.clone());
    followed.hyperparameters.insert("alternative".into(), json!("followed_greater"));
    for (series, results) in [("a", results_a), ("b", results_b)] {
        let f: Vec<f64> = results.iter().filter(|x| x.followed).filter_map(|x| x.score).collect();
        let u: Vec<f64> = results.iter().filter(|x| !x.followed).filter_map(|x| x.score).collect();
        let mut rf = summary_row("followed", series, &f);
        rf.p_value = group_compare(&f, &u, Alternative::Greater).ok().map(|r| r.p_value);
        followed.rows.push(rf);
        followed.rows.push(summary_row("unfollowed", series, &u));
    }

    // sentence segment shares
    let mut segments = Section::with_params(base);
    for (series, results) in [("a", results_a), ("b", results_b)] {
        let shares: Vec<[f64; 4]> = results.iter().filter_map(|x| x.segment_shares).collect();
        for k in 0..4 {
            let v: Vec<f64> = shares.iter().map(|s| s[k]).collect();
            segments.rows.push(summary_row(&format!("segment {}", k + 1), series, &v));
        }
    }
    Ok(vec![
        ("density_by_dataset".into(), by_dataset),
        ("density_followed".into(), followed),
        ("density_segments".into(), segments),
    ])
}

/// Density comparison of two bundles over annotated instances.
pub fn run_density_report(
    bundle_a: &ModelBundle,
    bundle_b: &ModelBundle,
    instances: &[AnnotatedInstance],
    params: &AttributionParams,
) -> Result<Vec<(String, Section)>> {
    let ra = score_instances(bundle_a, instances, params)?;
    let rb = score_instances(bundle_b, instances, params)?;
    density_sections(&ra, &rb, params)
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

fn check_same_architecture(a: &ModelBundle, b: &ModelBundle) -> Result<()> {
    let (ca, cb) = (a.config(), b.config());
    let same = (ca.n_layers, ca.n_heads, ca.d_model, ca.d_head, ca.d_ffn) == (cb.n_layers, cb.n_heads, cb.d_model, cb.d_head, cb.d_ffn)
        && a.vocabulary() == b.vocabulary();
    if !same {
        return Err(Error::Dimension("bundles differ in architecture or vocabulary".into()));
    }
    Ok(())
}

/// `1 − M` per 4-layer band at head and neuron level.
pub fn intersection_section(a: &[HeadAnalysis], b: &[HeadAnalysis], n_layers: usize, params: &AttnParams) -> Section {
    let mut s = Section::with_params(json!({
        "k": params.k,
        "top_n": params.top_n,
        "reference_words": params.reference_words,
        "band": CURVE_BAND,
        "threshold": "mean + 1.96 sd (population)",
        "value": "1 - intersection rate",
    }));
    for band in layer_bands(n_layers, CURVE_BAND) {
        let pairs: Vec<(&HeadAnalysis, &HeadAnalysis)> =
            a.iter().zip(b).filter(|(x, _)| band.contains(x.profile.layer)).collect();
        let head: Vec<f64> = pairs
            .iter()
            .filter_map(|(x, y)| jaccard(&x.profile.pair_set(), &y.profile.pair_set()).ok())
            .map(|m| 1.0 - m)
            .collect();
        let neuron: Vec<f64> = pairs
            .iter()
            .flat_map(|(x, y)| x.neuron_pairs.iter().zip(&y.neuron_pairs))
            .filter_map(|(p, q)| jaccard(p, q).ok())
            .map(|m| 1.0 - m)
            .collect();
        s.rows.push(summary_row(&band.label(), "head", &head));
        s.rows.push(summary_row(&band.label(), "neuron", &neuron));
    }
    s
}

/// Verb proportions per 8-layer band: group summaries and per-verb detail.
pub fn verb_sections(
    a: &[HeadAnalysis],
    b: &[HeadAnalysis],
    n_layers: usize,
    words: &WordListSet,
    params: &AttnParams,
) -> Result<(Section, Section)> {
    let pa: Vec<_> = a.iter().map(|h| h.profile.clone()).collect();
    let pb: Vec<_> = b.iter().map(|h| h.profile.clone()).collect();
    let bands = layer_bands(n_layers, VERB_BAND);
    let hp = json!({
        "k": params.k,
        "top_n": params.top_n,
        "band": VERB_BAND,
        "verb_match": "lowercase exact on either pair element",
        "alternative": "instruction_greater",
    });
    let mut groups = Section::with_params(hp.clone());
    let mut detail = Section::with_params(hp);
    let mut per_group: Vec<(&str, Vec<crate::attn_lens::VerbBandStats>)> = Vec::new();
    for (name, verbs) in [("instruction", &words.instruction_verbs), ("general", &words.general_verbs)] {
        if verbs.is_empty() {
            groups.notes.push(format!("{name} verb list is empty"));
            per_group.push((name, Vec::new()));
            continue;
        }
        per_group.push((name, verb_head_stats(&pa, &pb, verbs, &bands)?));
    }
    for band in &bands {
        let props = |stats: &[crate::attn_lens::VerbBandStats]| -> Vec<f64> {
            stats.iter().filter(|s| s.band == *band).filter_map(|s| s.proportion_more).collect()
        };
        let (ins, gen) = (props(&per_group[0].1), props(&per_group[1].1));
        let mut ri = summary_row(&band.label(), "instruction", &ins);
        ri.p_value = group_compare(&ins, &gen, Alternative::Greater).ok().map(|r| r.p_value);
        groups.rows.push(ri);
        groups.rows.push(summary_row(&band.label(), "general", &gen));
    }
    for (name, stats) in &per_group {
        for s in stats.iter().filter(|s| s.proportion_more.is_some()) {
            detail.rows.push(ReportRow::new(
                format!("{}@{}", s.verb, s.band.label()),
                *name,
                s.proportion_more,
                None,
                s.heads_more + s.heads_less,
            ));
        }
    }
    Ok((groups, detail))
}

/// Attention comparison: intersection-rate curves and verb tables.
pub fn run_attention_diff(
    bundle_a: &ModelBundle,
    bundle_b: &ModelBundle,
    glove: &EmbeddingTable,
    words: &WordListSet,
    params: &AttnParams,
) -> Result<Vec<(String, Section)>> {
    check_same_architecture(bundle_a, bundle_b)?;
    let mut analyses = analyze_bundles(&[bundle_a, bundle_b], glove, params)?;
    let b = analyses.pop().expect("two analyses");
    let a = analyses.pop().expect("two analyses");
    let n_layers = bundle_a.config().n_layers;
    let (groups, detail) = verb_sections(&a, &b, n_layers, words, params)?;
    Ok(vec![
        ("attention_intersection".into(), intersection_section(&a, &b, n_layers, params)),
        ("verb_heads".into(), groups),
        ("verb_heads_detail".into(), detail),
    ])
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

fn ffn_params_json(params: &FfnParams) -> Value {
    json!({
        "rank": params.rank,
        "k": params.k,
        "sign": "largest-magnitude entry positive",
    })
}

/// Cumulative explained variance at the configured rank, per layer and band.
pub fn variance_section(a: &[LayerConcepts], b: &[LayerConcepts], params: &FfnParams) -> Section {
    let mut s = Section::with_params(ffn_params_json(params));
    for (series, layers) in [("a", a), ("b", b)] {
        for l in layers {
            let v = l.curve.at(params.rank);
            s.rows.push(ReportRow::new(format!("layer {}", l.layer + 1), series, Some(v), None, 1));
        }
        let curves: Vec<_> = layers.iter().map(|l| l.curve.clone()).collect();
        for band in layer_group_summary(&curves, None, CURVE_BAND, params.rank) {
            let row_values: Vec<f64> = curves.iter().filter(|c| band.band.contains(c.layer)).map(|c| c.at(params.rank)).collect();
            s.rows.push(summary_row(&format!("band {}", band.band.label()), series, &row_values));
        }
    }
    s
}

/// Linguistic-level percentages per 4-layer band over all non-failed repeats.
fn linguistic_band_section(a: &[ConceptAnnotation], b: &[ConceptAnnotation], n_layers: usize, params: &FfnParams) -> Section {
    let mut s = Section::with_params(ffn_params_json(params));
    s.hyperparameters.insert("band".into(), json!(CURVE_BAND));
    for (series, anns) in [("a", a), ("b", b)] {
        let mut labels: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for ann in anns {
            let entry = labels.entry(ann.layer).or_default();
            entry.extend(ann.repeats.iter().filter(|r| !r.failed).filter_map(|r| r.linguistic).map(|l| l.name().to_string()));
        }
        let curves: Vec<_> = (0..n_layers)
            .map(|layer| crate::ffn_lens::VarianceCurve { layer, cumulative: vec![1.0] })
            .collect();
        for band in layer_group_summary(&curves, Some(&labels), CURVE_BAND, 1) {
            for level in crate::annotator::Linguistic::ALL {
                let v = band.label_percentages.get(level.name()).copied();
                let n = labels.iter().filter(|(l, _)| band.band.contains(**l)).map(|(_, v)| v.len()).sum();
                let value = if n == 0 { None } else { Some(v.unwrap_or(0.0)) };
                s.rows.push(ReportRow::new(format!("{}:{}", band.band.label(), level.name()), series, value, None, n));
            }
        }
    }
    s
}

/// FFN comparison: variance curves plus concept distributions from annotations.
pub fn run_ffn_diff(
    bundle_a: &ModelBundle,
    bundle_b: &ModelBundle,
    annotations_a: &[ConceptAnnotation],
    annotations_b: &[ConceptAnnotation],
    params: &FfnParams,
) -> Result<Vec<(String, Section)>> {
    check_same_architecture(bundle_a, bundle_b)?;
    if annotations_a.is_empty() || annotations_b.is_empty() {
        return Err(Error::MissingAnnotations("both bundles need concept annotations".into()));
    }
    let ca = ffn_analyze(bundle_a, &CandidateSet::vocabulary(bundle_a), &FfnParams { k: 1, ..params.clone() })?;
    let cb = ffn_analyze(bundle_b, &CandidateSet::vocabulary(bundle_b), &FfnParams { k: 1, ..params.clone() })?;
    let dist = aggregate_distribution(annotations_a, annotations_b)?;
    let mut concepts = Section::with_params(ffn_params_json(params));
    concepts.hyperparameters.insert("alternative".into(), json!("two_sided"));
    concepts.hyperparameters.insert("repeats_a".into(), json!(dist.repeats_a));
    concepts.hyperparameters.insert("repeats_b".into(), json!(dist.repeats_b));
    concepts.notes = dist.warnings.clone();
    for r in &dist.rows {
        let label = format!("{}:{}", r.group, r.category);
        concepts.rows.push(ReportRow::new(&label, "a", Some(r.mean_a), Some(r.sd_a), dist.repeats_a));
        let mut rb = ReportRow::new(&label, "b", Some(r.mean_b), Some(r.sd_b), dist.repeats_b);
        rb.p_value = r.p_value;
        concepts.rows.push(rb);
    }
    let n_layers = bundle_a.config().n_layers;
    Ok(vec![
        ("ffn_variance".into(), variance_section(&ca, &cb, params)),
        ("concept_distribution".into(), concepts),
        ("linguistic_by_band".into(), linguistic_band_section(annotations_a, annotations_b, n_layers, params)),
    ])
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapFormat {
    Ppm,
    Svg,
}

/// Gray level of `s` on a `0..=level_count` scale.
fn gray(s: f32, level_count: u32) -> u8 {
    if level_count == 0 {
        return 0;
    }
    let v = (f64::from(s) / f64::from(level_count)).clamp(0.0, 1.0);
    (v * 255.0).round() as u8
}

/// Binary PPM (P6), one `cell x cell` square per map entry: prompt tokens
/// down, response tokens across.
pub fn heatmap_ppm(map: &SalientMap, cell: usize) -> Vec<u8> {
    let (n, m) = map.normalized.shape();
    let cell = cell.max(1);
    let (w, h) = (m * cell, n * cell);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let g = gray(map.normalized.get(y / cell, x / cell), map.level_count);
            out.extend([g, g, g]);
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

/// SVG grid with prompt-token row labels and response-token column labels.
pub fn heatmap_svg(map: &SalientMap, cell: usize) -> String {
    let (n, m) = map.normalized.shape();
    let cell = cell.max(1);
    let label_w = 8 * map.prompt_tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1).max(1) + 8;
    let label_h = 8 * map.response_tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1).max(1) + 8;
    let (w, h) = (label_w + m * cell, label_h + n * cell);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="10">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for (i, t) in map.prompt_tokens.iter().enumerate() {
        let y = label_h + i * cell + cell / 2 + 3;
        writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, label_w - 4, xml_escape(t)).unwrap();
    }
    for (j, t) in map.response_tokens.iter().enumerate() {
        let x = label_w + j * cell + cell / 2 + 3;
        let y = label_h - 4;
        writeln!(s, r#"<text x="{x}" y="{y}" transform="rotate(-90 {x} {y})">{}</text>"#, xml_escape(t)).unwrap();
    }
    for i in 0..n {
        for j in 0..m {
            let g = gray(map.normalized.get(i, j), map.level_count);
            writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#,
                label_w + j * cell,
                label_h + i * cell
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_heatmap(map: &SalientMap, out_path: &Path, format: HeatmapFormat) -> Result<()> {
    let bytes = match format {
        HeatmapFormat::Ppm => heatmap_ppm(map, 16),
        HeatmapFormat::Svg => heatmap_svg(map, 16).into_bytes(),
    };
    std::fs::write(out_path, bytes).map_err(|e| Error::io(out_path, e))
}
