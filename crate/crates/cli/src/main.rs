// SPDX-License-Identifier: MIT OR Apache-2.0

//! `tunelens` command-line front end.

mod config;

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{pick, FileConfig};
use tunelens::annotator::{
    load_annotations, save_annotations, Annotator, AnnotatorConfig, ChatBackend, HttpBackend, ReplayBackend,
    ReplayFixture,
};
use tunelens::attn_lens::{analyze_bundle as attn_analyze, profiles_to_json, AttnParams};
use tunelens::attribution::{load_instances, normalize_map, AttributionParams, ImportanceMethod, SalientMap};
use tunelens::checkpoint::wordlist::default_instruction_verbs;
use tunelens::ffn_lens::{analyze_bundle as ffn_analyze, concepts_to_json, curves_to_csv, CandidateSet, FfnParams};
use tunelens::fixture::{planted_attention, try_random_bundle, FixtureSpec, PlantedSpec};
use tunelens::report::{render_heatmap, run_attention_diff, run_density_report, run_ffn_diff, DiffReport, HeatmapFormat};
use tunelens::checkpoint::load_glove;
use tunelens::{load_bundle_dir, GradientTarget, ModelBundle, WordListSet};

/// Environment variable holding the chat endpoint API key.
const API_KEY_ENV: &str = "TUNELENS_API_KEY";

#[derive(Parser)]
#[command(name = "tunelens", version, about = "Compare pre-trained and instruction-tuned checkpoints")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores). Output does not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Salient map for one prompt/response pair.
    Attribute(AttributeArgs),
    /// Instruction-density comparison over annotated instances.
    DensityReport(DensityArgs),
    /// Word-pair profiles of every attention head.
    AttnPairs(AttnPairsArgs),
    /// Attention comparison: intersection rates and verb tables.
    AttnDiff(AttnDiffArgs),
    /// Principal components of every FFN layer and their top words.
    FfnConcepts(FfnConceptsArgs),
    /// FFN comparison from concept annotations.
    FfnDiff(FfnDiffArgs),
    /// Describe and classify FFN concepts with a chat model.
    Annotate(AnnotateArgs),
    /// Draw a salient map as PPM or SVG.
    Render(RenderArgs),
    /// Write a seeded toy bundle (or planted attention pair).
    MakeFixture(MakeFixtureArgs),
}

#[derive(Args)]
struct MapFlags {
    /// Number of importance levels (L).
    #[arg(short = 'L', long)]
    level_count: Option<u32>,
    /// Levels at or below this are zeroed (b).
    #[arg(short = 'b', long)]
    threshold_b: Option<u32>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    gradient_target: Option<TargetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Auto,
    Occlusion,
    Gradient,
}

impl From<MethodArg> for ImportanceMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Auto => Self::Auto,
            MethodArg::Occlusion => Self::Occlusion,
            MethodArg::Gradient => Self::Gradient,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Probability,
    Logit,
}

impl From<TargetArg> for GradientTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Probability => Self::Probability,
            TargetArg::Logit => Self::Logit,
        }
    }
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    response: String,
    #[command(flatten)]
    map: MapFlags,
    /// Write the normalized map as TSV here as well.
    #[arg(long)]
    tsv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    bundle_a: PathBuf,
    #[arg(long)]
    bundle_b: PathBuf,
    /// JSON-lines annotated instances.
    #[arg(long)]
    instances: PathBuf,
    #[command(flatten)]
    map: MapFlags,
    /// Density norm (p).
    #[arg(short = 'p', long)]
    p_norm: Option<f64>,
    #[arg(long)]
    min_response_len: Option<usize>,
    #[command(flatten)]
    out: ReportOut,
}

#[derive(Args)]
struct ReportOut {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flattened rows as TSV.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct AttnFlags {
    /// GloVe text file, most frequent words first.
    #[arg(long)]
    glove: PathBuf,
    /// Words per neuron list (K).
    #[arg(short = 'K', long)]
    neuron_k: Option<usize>,
    /// Pairs kept per head.
    #[arg(long)]
    top_n: Option<usize>,
    /// Leading GloVe words used for thresholds.
    #[arg(long)]
    reference_words: Option<usize>,
}

#[derive(Args)]
struct AttnPairsArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    attn: AttnFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttnDiffArgs {
    #[arg(long)]
    bundle_a: PathBuf,
    #[arg(long)]
    bundle_b: PathBuf,
    #[command(flatten)]
    attn: AttnFlags,
    /// Instruction verbs, one per line (default: built-in list).
    #[arg(long)]
    instruction_verbs: Option<PathBuf>,
    /// General verbs, one per line.
    #[arg(long)]
    general_verbs: PathBuf,
    #[command(flatten)]
    out: ReportOut,
}

#[derive(Args)]
struct FfnFlags {
    /// Components per layer (R).
    #[arg(short = 'R', long)]
    rank: Option<usize>,
    /// Words per component (k).
    #[arg(short = 'k', long)]
    concept_k: Option<usize>,
    /// Also list words of the negated direction.
    #[arg(long)]
    both_signs: Option<bool>,
    /// Restrict candidates to these words, one per line.
    #[arg(long)]
    words: Option<PathBuf>,
}

#[derive(Args)]
struct FfnConceptsArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    ffn: FfnFlags,
    /// Cumulative variance curves as CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FfnDiffArgs {
    #[arg(long)]
    bundle_a: PathBuf,
    #[arg(long)]
    bundle_b: PathBuf,
    #[arg(long)]
    annotations_a: PathBuf,
    #[arg(long)]
    annotations_b: PathBuf,
    #[arg(short = 'R', long)]
    rank: Option<usize>,
    #[command(flatten)]
    out: ReportOut,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    ffn: FfnFlags,
    /// Only these 0-based layers (comma separated).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Chat-completions endpoint; the key is read from TUNELENS_API_KEY.
    #[arg(long, conflicts_with = "replay")]
    endpoint: Option<String>,
    /// Offline replay fixture instead of a live endpoint.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    /// JSON-lines log of every request and response.
    #[arg(long)]
    audit: Option<PathBuf>,
    /// Save a replay fixture reproducing this run.
    #[arg(long)]
    save_replay: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Ppm,
    Svg,
}

#[derive(Args)]
struct RenderArgs {
    /// Map JSON written by `attribute`.
    #[arg(long)]
    map: PathBuf,
    #[arg(short = 'L', long)]
    level_count: Option<u32>,
    #[arg(short = 'b', long)]
    threshold_b: Option<u32>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeFixtureArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Planted attention pair instead of a single random bundle.
    #[arg(long)]
    planted: bool,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let workers = pick(cli.workers, file.workers, 0);
    match cli.command {
        Command::Attribute(a) => attribute(a, &file, workers),
        Command::DensityReport(a) => density_report(a, &file, workers),
        Command::AttnPairs(a) => attn_pairs(a, &file, workers),
        Command::AttnDiff(a) => attn_diff(a, &file, workers),
        Command::FfnConcepts(a) => ffn_concepts(a, &file, workers),
        Command::FfnDiff(a) => ffn_diff(a, &file, workers),
        Command::Annotate(a) => annotate(a, &file, workers),
        Command::Render(a) => render(a, &file),
        Command::MakeFixture(a) => make_fixture(a),
    }
}

fn load(dir: &Path) -> Result<ModelBundle> {
    load_bundle_dir(dir).with_context(|| format!("loading bundle {}", dir.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn attribution_params(map: &MapFlags, file: &FileConfig, default_b: u32, workers: usize) -> AttributionParams {
    let d = AttributionParams::default();
    AttributionParams {
        level_count: pick(map.level_count, file.level_count, d.level_count),
        threshold_b: pick(map.threshold_b, file.threshold_b, default_b),
        p_norm: pick(None, file.p_norm, d.p_norm),
        min_response_len: pick(None, file.min_response_len, d.min_response_len),
        method: pick(map.method.map(Into::into), file.method, d.method),
        gradient_target: pick(map.gradient_target.map(Into::into), file.gradient_target, d.gradient_target),
        workers,
    }
}

fn attribute(a: AttributeArgs, file: &FileConfig, workers: usize) -> Result<()> {
    let bundle = load(&a.bundle)?;
    let params = attribution_params(&a.map, file, 0, workers);
    let vocab = bundle.vocabulary();
    let map = SalientMap::compute(&bundle, &vocab.tokenize(&a.prompt), &vocab.tokenize(&a.response), &params)?;
    if let Some(p) = &a.tsv {
        emit(Some(p), &map.to_tsv())?;
    }
    emit(a.out.as_deref(), &(map.to_json()? + "\n"))
}

fn write_report(report: &DiffReport, out: &ReportOut) -> Result<()> {
    report.validate()?;
    if let Some(p) = &out.tsv {
        emit(Some(p), &report.to_tsv())?;
    }
    emit(out.out.as_deref(), &report.to_json()?)
}

fn density_report(a: DensityArgs, file: &FileConfig, workers: usize) -> Result<()> {
    let (ba, bb) = (load(&a.bundle_a)?, load(&a.bundle_b)?);
    let instances = load_instances(&a.instances)?;
    let mut params = attribution_params(&a.map, file, AttributionParams::default().threshold_b, workers);
    params.p_norm = pick(a.p_norm, file.p_norm, params.p_norm);
    params.min_response_len = pick(a.min_response_len, file.min_response_len, params.min_response_len);
    let mut report = DiffReport::new(&ba, &bb);
    report.extend(run_density_report(&ba, &bb, &instances, &params)?);
    write_report(&report, &a.out)
}

fn attn_params(f: &AttnFlags, file: &FileConfig, workers: usize) -> AttnParams {
    let d = AttnParams::default();
    AttnParams {
        k: pick(f.neuron_k, file.neuron_k, d.k),
        top_n: pick(f.top_n, file.top_n, d.top_n),
        reference_words: pick(f.reference_words, file.reference_words, d.reference_words),
        workers,
    }
}

fn attn_pairs(a: AttnPairsArgs, file: &FileConfig, workers: usize) -> Result<()> {
    let bundle = load(&a.bundle)?;
    let glove = load_glove(&a.attn.glove)?;
    let analyses = attn_analyze(&bundle, &glove, &attn_params(&a.attn, file, workers))?;
    let profiles: Vec<_> = analyses.into_iter().map(|h| h.profile).collect();
    emit(a.out.as_deref(), &(profiles_to_json(&profiles)? + "\n"))
}

fn attn_diff(a: AttnDiffArgs, file: &FileConfig, workers: usize) -> Result<()> {
    let (ba, bb) = (load(&a.bundle_a)?, load(&a.bundle_b)?);
    let glove = load_glove(&a.attn.glove)?;
    let words = WordListSet {
        instruction_verbs: match &a.instruction_verbs {
            Some(p) => tunelens::checkpoint::load_word_list(p)?,
            None => default_instruction_verbs(),
        },
        general_verbs: tunelens::checkpoint::load_word_list(&a.general_verbs)?,
        restricted_vocab: None,
    };
    let params = attn_params(&a.attn, file, workers);
    let mut report = DiffReport::new(&ba, &bb);
    report.extend(run_attention_diff(&ba, &bb, &glove, &words, &params)?);
    write_report(&report, &a.out)
}

fn ffn_params(f: &FfnFlags, file: &FileConfig, workers: usize) -> FfnParams {
    let d = FfnParams::default();
    FfnParams {
        rank: pick(f.rank, file.rank, d.rank),
        k: pick(f.concept_k, file.concept_k, d.k),
        both_signs: pick(f.both_signs, file.both_signs, d.both_signs),
        workers,
    }
}

fn candidates(bundle: &ModelBundle, words: Option<&Path>) -> Result<CandidateSet> {
    Ok(match words {
        Some(p) => CandidateSet::restricted(bundle, &tunelens::checkpoint::load_word_list(p)?)?,
        None => CandidateSet::vocabulary(bundle),
    })
}

fn ffn_concepts(a: FfnConceptsArgs, file: &FileConfig, workers: usize) -> Result<()> {
    let bundle = load(&a.bundle)?;
    let cands = candidates(&bundle, a.ffn.words.as_deref())?;
    let layers = ffn_analyze(&bundle, &cands, &ffn_params(&a.ffn, file, workers))?;
    if let Some(p) = &a.curves {
        let curves: Vec<_> = layers.iter().map(|l| l.curve.clone()).collect();
        emit(Some(p), &curves_to_csv(&curves))?;
    }
    let values = layers
        .iter()
        .map(|l| Ok(serde_json::from_str::<serde_json::Value>(&concepts_to_json(l)?)?))
        .collect::<Result<Vec<_>>>()?;
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&values)? + "\n"))
}

fn ffn_diff(a: FfnDiffArgs, file: &FileConfig, workers: usize) -> Result<()> {
    let (ba, bb) = (load(&a.bundle_a)?, load(&a.bundle_b)?);
    let ann_a = load_annotations(&a.annotations_a)?;
    let ann_b = load_annotations(&a.annotations_b)?;
    let params = FfnParams {
        rank: pick(a.rank, file.rank, FfnParams::default().rank),
        workers,
        ..FfnParams::default()
    };
    let mut report = DiffReport::new(&ba, &bb);
    report.extend(run_ffn_diff(&ba, &bb, &ann_a, &ann_b, &params)?);
    write_report(&report, &a.out)
}

fn annotate(a: AnnotateArgs, file: &FileConfig, workers: usize) -> Result<()> {
    let bundle = load(&a.bundle)?;
    let cands = candidates(&bundle, a.ffn.words.as_deref())?;
    let params = ffn_params(&a.ffn, file, workers);
    let layers = ffn_analyze(&bundle, &cands, &params)?;
    let items: Vec<(usize, usize, Vec<String>)> = layers
        .iter()
        .filter(|l| a.layers.as_ref().is_none_or(|keep| keep.contains(&l.layer)))
        .flat_map(|l| {
            l.components
                .iter()
                .map(|c| (l.layer, c.rank, c.top_words.iter().map(|w| w.word.clone()).collect()))
        })
        .collect();

    let mut cfg: AnnotatorConfig = file.annotator.clone().unwrap_or_default();
    if let Some(m) = a.model {
        cfg.model = m;
    }
    let backend: Box<dyn ChatBackend> = match (&a.endpoint, &a.replay) {
        (Some(url), None) => {
            let key = std::env::var(API_KEY_ENV).ok();
            Box::new(HttpBackend::new(url.clone(), key, Duration::from_secs(a.timeout_secs)))
        }
        (None, Some(p)) => Box::new(ReplayBackend::new(ReplayFixture::load(p)?)),
        _ => bail!("give exactly one of --endpoint or --replay"),
    };
    let annotator = Annotator::new(backend.as_ref(), cfg);
    let result = annotator.annotate_all(&items);
    // the audit log is kept even when a request ultimately fails
    if let Some(p) = &a.audit {
        annotator.write_audit(p)?;
    }
    let annotations = result?;
    if let Some(p) = &a.save_replay {
        ReplayFixture::from_audit(&annotator.audit_records()).save(p)?;
    }
    save_annotations(&a.out, &annotations)?;
    Ok(())
}

fn render(a: RenderArgs, file: &FileConfig) -> Result<()> {
    let text = std::fs::read_to_string(&a.map).with_context(|| format!("reading {}", a.map.display()))?;
    let mut map: SalientMap = serde_json::from_str(&text).context("parsing map JSON")?;
    map.level_count = pick(a.level_count, file.level_count, AttributionParams::default().level_count);
    map.threshold_b = pick(a.threshold_b, file.threshold_b, 0);
    map.normalized = normalize_map(&map.importance, map.level_count, map.threshold_b)?;
    let format = match a.format {
        Some(FormatArg::Ppm) => HeatmapFormat::Ppm,
        Some(FormatArg::Svg) => HeatmapFormat::Svg,
        None if a.out.extension().is_some_and(|e| e == "ppm") => HeatmapFormat::Ppm,
        None => HeatmapFormat::Svg,
    };
    render_heatmap(&map, &a.out, format)?;
    Ok(())
}

fn make_fixture(a: MakeFixtureArgs) -> Result<()> {
    if a.planted {
        let d = PlantedSpec::default();
        let spec = PlantedSpec {
            n_layers: a.n_layers.unwrap_or(d.n_layers),
            d_model: a.d_model.unwrap_or(d.d_model),
            ..d
        };
        planted_attention(&spec, a.seed)?.save(&a.out)?;
    } else {
        let d = FixtureSpec::default();
        let spec = FixtureSpec {
            n_layers: a.n_layers.unwrap_or(d.n_layers),
            d_model: a.d_model.unwrap_or(d.d_model),
            vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
            ..d
        };
        try_random_bundle(&spec, a.seed)?.save(&a.out)?;
    }
    Ok(())
}
