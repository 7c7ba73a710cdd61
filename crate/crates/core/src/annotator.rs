// SPDX-License-Identifier: MIT OR Apache-2.0

//! Chat-model annotation of concept word lists.
//!
//! Three fixed few-shot templates drive the annotator: one condenses a word
//! list into a short concept description, one maps a description to the
//! assistant tasks it serves, and one assigns it a linguistic level. The
//! template files under `templates/` are kept byte-for-byte as published and
//! are turned into chat messages by [`template_messages`].
//!
//! Summaries are requested five times per component (temperature 0 first,
//! then 1); classifications always run at temperature 0. Every request and
//! response is recorded for audit and offline replay.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::stats::{summarize, welch_t_test, Alternative};

pub const SUMMARIZE_TEMPLATE: &str = include_str!("../templates/summarize.txt");
pub const TASKS_TEMPLATE: &str = include_str!("../templates/tasks.txt");
pub const LINGUISTIC_TEMPLATE: &str = include_str!("../templates/linguistic.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Summarize,
    Tasks,
    Linguistic,
}

impl TemplateKind {
    pub fn text(self) -> &'static str {
        match self {
            Self::Summarize => SUMMARIZE_TEMPLATE,
            Self::Tasks => TASKS_TEMPLATE,
            Self::Linguistic => LINGUISTIC_TEMPLATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Splits a template into chat turns.
///
/// Lines beginning with `System:`, `User:` or `Agent:` open a turn (roles
/// `system`, `user`, `assistant`); other nonblank lines continue the open
/// turn and are concatenated as-is, since the published line breaks carry
/// their own trailing spaces (or split words). The escape `\n` becomes a
/// newline and trailing whitespace is trimmed. The template's last turn is
/// the open user prompt to which a payload is appended.
pub fn template_messages(kind: TemplateKind) -> Vec<ChatMessage> {
    let mut turns: Vec<ChatMessage> = Vec::new();
    for line in kind.text().lines() {
        let opened = [("System:", "system"), ("User:", "user"), ("Agent:", "assistant")]
            .iter()
            .find_map(|(prefix, role)| line.strip_prefix(prefix).map(|rest| (*role, rest)));
        match opened {
            Some((role, rest)) => turns.push(ChatMessage {
                role: role.to_string(),
                content: rest.strip_prefix(' ').unwrap_or(rest).to_string(),
            }),
            None if line.trim().is_empty() => {}
            None => {
                if let Some(last) = turns.last_mut() {
                    last.content.push_str(line);
                }
            }
        }
    }
    for t in &mut turns {
        t.content = t.content.replace("\\n", "\n").trim_end().to_string();
    }
    turns
}

/// Template messages with `payload` appended to the final user turn.
pub fn render(kind: TemplateKind, payload: &str) -> Vec<ChatMessage> {
    let mut messages = template_messages(kind);
    let last = messages.last_mut().expect("templates end with a user turn");
    last.content.push(' ');
    last.content.push_str(payload.trim());
    messages
}

/// Payload for the summarization template: `a, b, c.`
pub fn words_payload(words: &[String]) -> String {
    format!("{}.", words.join(", "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
}

impl ChatRequest {
    pub fn body(&self) -> String {
        serde_json::to_string(self).expect("chat request serializes")
    }

    /// Hex sha256 of the JSON body.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.body().as_bytes()))
    }
}

/// Where a request sits in the annotation schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestContext {
    pub layer: usize,
    pub rank: usize,
    pub repeat: usize,
    pub template: TemplateKind,
}

/// A chat-completion endpoint.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest, ctx: &RequestContext) -> Result<String>;
}

/// Chat-completion over HTTP (`POST {model, messages, temperature, top_p}`),
/// reading the first choice's message content.
#[derive(Debug)]
pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            api_key,
            agent,
        }
    }
}

/// Extracts `choices[0].message.content` from a completion response.
pub fn parse_completion(body: &str) -> Result<String> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| Error::Backend(format!("malformed response: {e}")))?;
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Backend("response has no choices[0].message.content".into()))
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest, _ctx: &RequestContext) -> Result<String> {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(request.body()).map_err(|e| Error::Backend(e.to_string()))?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| Error::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Backend(format!("HTTP {status}: {text}")));
        }
        parse_completion(&text)
    }
}

/// Recorded responses keyed by request hash; entry `i` answers repeat `i`
/// (the last entry answers any later repeat).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub responses: BTreeMap<String, Vec<String>>,
    /// Answer for requests without a recording.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl ReplayFixture {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Records `response` for `request` at `repeat`.
    pub fn insert(&mut self, request: &ChatRequest, repeat: usize, response: impl Into<String>) {
        let list = self.responses.entry(request.hash()).or_default();
        if list.len() <= repeat {
            let fill = list.last().cloned().unwrap_or_default();
            list.resize(repeat + 1, fill);
        }
        list[repeat] = response.into();
    }

    /// Fixture reproducing every response of an audit log.
    pub fn from_audit(records: &[AuditRecord]) -> Self {
        let mut f = Self::default();
        for r in records {
            f.insert(&r.request, r.context.repeat, r.response.clone());
        }
        f
    }
}

/// Offline backend replaying a [`ReplayFixture`].
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    fixture: ReplayFixture,
}

impl ReplayBackend {
    pub fn new(fixture: ReplayFixture) -> Self {
        Self { fixture }
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest, ctx: &RequestContext) -> Result<String> {
        match self.fixture.responses.get(&request.hash()) {
            Some(list) if !list.is_empty() => Ok(list[ctx.repeat.min(list.len() - 1)].clone()),
            _ => self
                .fixture
                .fallback
                .clone()
                .ok_or_else(|| Error::Backend(format!("no recorded response for request {}", request.hash()))),
        }
    }
}

/// Backend answering through a closure (for tests and scripted demos).
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest, &RequestContext) -> Result<String> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest, ctx: &RequestContext) -> Result<String> {
        (self.0)(request, ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    pub model: String,
    pub top_p: f64,
    /// One summarization per entry, in order.
    pub summarize_temperatures: Vec<f64>,
    pub classify_temperature: f64,
    /// Attempts per request (first try included).
    pub retries: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff_ms: u64,
    /// Components annotated concurrently.
    pub concurrency: usize,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo-0613".into(),
            top_p: 0.9,
            summarize_temperatures: vec![0.0, 1.0, 1.0, 1.0, 1.0],
            classify_temperature: 0.0,
            retries: 3,
            backoff_ms: 500,
            concurrency: 4,
        }
    }
}

/// One request/response exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub context: RequestContext,
    pub request: ChatRequest,
    pub response: String,
    pub attempts: usize,
}

/// Reads a JSON-lines audit log.
pub fn load_audit(path: &Path) -> Result<Vec<AuditRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Writing,
    Math,
    Coding,
    Translation,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Self::Writing, Self::Math, Self::Coding, Self::Translation];

    pub fn name(self) -> &'static str {
        match self {
            Self::Writing => "writing",
            Self::Math => "math",
            Self::Coding => "coding",
            Self::Translation => "translation",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLabels {
    pub scenarios: BTreeSet<Scenario>,
    /// The reply said `None`.
    pub none: bool,
    /// Reply fragments matching no task.
    pub unparsed: Vec<String>,
}

fn clean_label(s: &str) -> String {
    s.trim().trim_end_matches('.').trim().to_lowercase()
}

/// Parses a task-classification reply (labels separated by `;`).
pub fn parse_tasks(reply: &str) -> TaskLabels {
    let mut out = TaskLabels::default();
    for part in reply.split(';').map(clean_label).filter(|p| !p.is_empty()) {
        match part.as_str() {
            "daily writing" | "literary writing" | "professional writing" => {
                out.scenarios.insert(Scenario::Writing);
            }
            "solving math problems" => {
                out.scenarios.insert(Scenario::Math);
            }
            "coding" => {
                out.scenarios.insert(Scenario::Coding);
            }
            "translation" => {
                out.scenarios.insert(Scenario::Translation);
            }
            "none" => out.none = true,
            _ => out.unparsed.push(part),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linguistic {
    Phonology,
    Morphology,
    Syntax,
    Semantic,
}

impl Linguistic {
    pub const ALL: [Linguistic; 4] = [Self::Phonology, Self::Morphology, Self::Syntax, Self::Semantic];

    pub fn name(self) -> &'static str {
        match self {
            Self::Phonology => "phonology",
            Self::Morphology => "morphology",
            Self::Syntax => "syntax",
            Self::Semantic => "semantic",
        }
    }
}

/// Parses a linguistic-level reply; `None` when it names no level.
pub fn parse_linguistic(reply: &str) -> Option<Linguistic> {
    match clean_label(reply).as_str() {
        "phonology" => Some(Linguistic::Phonology),
        "morphology" => Some(Linguistic::Morphology),
        "syntax" => Some(Linguistic::Syntax),
        "semantic" | "semantics" => Some(Linguistic::Semantic),
        _ => None,
    }
}

/// `Cannot Tell` anywhere in a description, in any case.
pub fn is_failed_description(description: &str) -> bool {
    description.to_lowercase().contains("cannot tell")
}

/// Annotation of one summarization repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatAnnotation {
    pub repeat: usize,
    pub temperature: f64,
    pub description: String,
    pub failed: bool,
    /// Absent for failed descriptions.
    pub tasks: Option<TaskLabels>,
    pub linguistic: Option<Linguistic>,
    /// Raw level reply when it could not be parsed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linguistic_unparsed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAnnotation {
    pub layer: usize,
    pub rank: usize,
    pub words: Vec<String>,
    pub repeats: Vec<RepeatAnnotation>,
}

impl ConceptAnnotation {
    pub fn descriptions(&self) -> Vec<&str> {
        self.repeats.iter().map(|r| r.description.as_str()).collect()
    }
}

/// Runs the annotation schedule against a backend, recording every exchange.
pub struct Annotator<'a> {
    backend: &'a dyn ChatBackend,
    config: AnnotatorConfig,
    audit: Mutex<Vec<AuditRecord>>,
}

impl<'a> Annotator<'a> {
    pub fn new(backend: &'a dyn ChatBackend, config: AnnotatorConfig) -> Self {
        Self {
            backend,
            config,
            audit: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &AnnotatorConfig {
        &self.config
    }

    pub fn request(&self, kind: TemplateKind, payload: &str, temperature: f64) -> ChatRequest {
        ChatRequest {
            model: self.config.model.clone(),
            messages: render(kind, payload),
            temperature,
            top_p: self.config.top_p,
        }
    }

    fn call(&self, ctx: RequestContext, request: ChatRequest) -> Result<String> {
        let attempts = self.config.retries.max(1);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut last = None;
        for attempt in 1..=attempts {
            match self.backend.complete(&request, &ctx) {
                Ok(response) => {
                    self.audit.lock().expect("audit lock").push(AuditRecord {
                        context: ctx,
                        request,
                        response: response.clone(),
                        attempts: attempt,
                    });
                    return Ok(response);
                }
                Err(e) => {
                    log::warn!("annotator request {ctx:?} attempt {attempt}/{attempts} failed: {e}");
                    last = Some(e);
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    /// One description per scheduled temperature.
    pub fn summarize_concept(&self, layer: usize, rank: usize, words: &[String]) -> Result<Vec<(f64, String)>> {
        if words.is_empty() {
            return Err(Error::InvalidArgument("cannot summarize an empty word list".into()));
        }
        let payload = words_payload(words);
        self.config
            .summarize_temperatures
            .iter()
            .enumerate()
            .map(|(repeat, &t)| {
                let ctx = RequestContext { layer, rank, repeat, template: TemplateKind::Summarize };
                let d = self.call(ctx, self.request(TemplateKind::Summarize, &payload, t))?;
                Ok((t, d.trim().to_string()))
            })
            .collect()
    }

    pub fn classify_tasks(&self, ctx: (usize, usize, usize), description: &str) -> Result<TaskLabels> {
        let (layer, rank, repeat) = ctx;
        let c = RequestContext { layer, rank, repeat, template: TemplateKind::Tasks };
        let reply = self.call(c, self.request(TemplateKind::Tasks, description, self.config.classify_temperature))?;
        Ok(parse_tasks(&reply))
    }

    pub fn classify_linguistic(&self, ctx: (usize, usize, usize), description: &str) -> Result<(Option<Linguistic>, String)> {
        let (layer, rank, repeat) = ctx;
        let c = RequestContext { layer, rank, repeat, template: TemplateKind::Linguistic };
        let reply =
            self.call(c, self.request(TemplateKind::Linguistic, description, self.config.classify_temperature))?;
        Ok((parse_linguistic(&reply), reply))
    }

    /// Full schedule for one component; repeats run in order.
    pub fn annotate_component(&self, layer: usize, rank: usize, words: &[String]) -> Result<ConceptAnnotation> {
        let summaries = self.summarize_concept(layer, rank, words)?;
        let repeats = summaries
            .into_iter()
            .enumerate()
            .map(|(repeat, (temperature, description))| {
                let failed = is_failed_description(&description);
                let (tasks, linguistic, linguistic_unparsed) = if failed {
                    (None, None, None)
                } else {
                    let tasks = self.classify_tasks((layer, rank, repeat), &description)?;
                    let (level, raw) = self.classify_linguistic((layer, rank, repeat), &description)?;
                    (Some(tasks), level, level.is_none().then_some(raw))
                };
                Ok(RepeatAnnotation {
                    repeat,
                    temperature,
                    description,
                    failed,
                    tasks,
                    linguistic,
                    linguistic_unparsed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConceptAnnotation {
            layer,
            rank,
            words: words.to_vec(),
            repeats,
        })
    }

    /// Annotates `(layer, rank, words)` items with bounded concurrency;
    /// results follow the input order.
    pub fn annotate_all(&self, items: &[(usize, usize, Vec<String>)]) -> Result<Vec<ConceptAnnotation>> {
        map_indexed(self.config.concurrency, items.len(), |i| {
            let (l, r, ref w) = items[i];
            self.annotate_component(l, r, w)
        })
    }

    /// Audit records sorted by `(layer, rank, repeat, template)`.
    pub fn audit_records(&self) -> Vec<AuditRecord> {
        let mut v = self.audit.lock().expect("audit lock").clone();
        v.sort_by_key(|r| r.context);
        v
    }

    pub fn write_audit(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in self.audit_records() {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Distribution of one category across repeats for two bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    /// `scenario`, `linguistic` or `interpretability`.
    pub group: String,
    pub category: String,
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
    /// Two-sided Welch p-value over per-repeat percentages.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub repeats_a: usize,
    pub repeats_b: usize,
    pub rows: Vec<DistributionRow>,
    pub warnings: Vec<String>,
}

/// Per-repeat percentages for one bundle: `(group, category) -> values`.
fn repeat_percentages(
    annotations: &[ConceptAnnotation],
    label: &str,
    warnings: &mut Vec<String>,
) -> (usize, BTreeMap<(String, String), Vec<f64>>) {
    let n_repeats = annotations.iter().map(|a| a.repeats.len()).max().unwrap_or(0);
    let mut out: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut used = 0;
    for r in 0..n_repeats {
        let reps: Vec<&RepeatAnnotation> = annotations.iter().filter_map(|a| a.repeats.get(r)).collect();
        let ok: Vec<&&RepeatAnnotation> = reps.iter().filter(|x| !x.failed).collect();
        if ok.is_empty() {
            let msg = format!("bundle {label}: repeat {r} has no parsed concepts; excluded");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        used += 1;
        let pct = |count: usize, total: usize| if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 };
        let mut push = |g: &str, c: &str, v: f64| out.entry((g.to_string(), c.to_string())).or_default().push(v);
        push("interpretability", "interpretable", pct(ok.len(), reps.len()));
        for s in Scenario::ALL {
            let n = ok.iter().filter(|x| x.tasks.as_ref().is_some_and(|t| t.scenarios.contains(&s))).count();
            push("scenario", s.name(), pct(n, ok.len()));
        }
        let none = ok.iter().filter(|x| x.tasks.as_ref().is_some_and(|t| t.scenarios.is_empty())).count();
        push("scenario", "none", pct(none, ok.len()));
        let parsed: Vec<Linguistic> = ok.iter().filter_map(|x| x.linguistic).collect();
        for l in Linguistic::ALL {
            push("linguistic", l.name(), pct(parsed.iter().filter(|&&p| p == l).count(), parsed.len()));
        }
    }
    (used, out)
}

/// Compares two bundles' annotations category by category.
pub fn aggregate_distribution(a: &[ConceptAnnotation], b: &[ConceptAnnotation]) -> Result<DistributionReport> {
    let keys = |x: &[ConceptAnnotation]| x.iter().map(|c| (c.layer, c.rank)).collect::<BTreeSet<_>>();
    if a.is_empty() || keys(a) != keys(b) {
        return Err(Error::MissingAnnotations("both bundles need annotations for the same components".into()));
    }
    let mut warnings = Vec::new();
    let (ra, pa) = repeat_percentages(a, "a", &mut warnings);
    let (rb, pb) = repeat_percentages(b, "b", &mut warnings);
    if ra < 2 || rb < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 usable repeats per bundle, got {ra} and {rb}")));
    }
    let categories: BTreeSet<&(String, String)> = pa.keys().chain(pb.keys()).collect();
    let empty = Vec::new();
    let group_order: HashMap<&str, usize> =
        [("scenario", 0), ("linguistic", 1), ("interpretability", 2)].into_iter().collect();
    let mut rows: Vec<DistributionRow> = categories
        .into_iter()
        .map(|key| {
            let (va, vb) = (pa.get(key).unwrap_or(&empty), pb.get(key).unwrap_or(&empty));
            let (sa, sb) = (summarize(va), summarize(vb));
            DistributionRow {
                group: key.0.clone(),
                category: key.1.clone(),
                mean_a: sa.mean,
                sd_a: sa.sd,
                mean_b: sb.mean,
                sd_b: sb.sd,
                p_value: welch_t_test(va, vb, Alternative::TwoSided).ok().map(|r| r.p_value),
            }
        })
        .collect();
    rows.sort_by_key(|r| group_order.get(r.group.as_str()).copied().unwrap_or(usize::MAX));
    Ok(DistributionReport {
        repeats_a: ra,
        repeats_b: rb,
        rows,
        warnings,
    })
}

pub fn save_annotations(path: &Path, annotations: &[ConceptAnnotation]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(annotations)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<Vec<ConceptAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn templates_parse_into_turns() {
        let m = template_messages(TemplateKind::Summarize);
        assert_eq!(m[0].role, "system");
        assert!(m[0].content.contains("concept/topic/theme/behavior/pattern what"));
        assert_eq!(m[2].content, "dates.");
        assert_eq!(m.last().unwrap().content, "Words:");
        assert_eq!(m.len(), 12);
        let t = template_messages(TemplateKind::Tasks);
        assert!(t[0].content.contains("used for?\n\nTasks: daily writing, literary writing,"));
        assert_eq!(t.last().unwrap().content, "Concept: Words are");
        let l = template_messages(TemplateKind::Linguistic);
        assert_eq!(l.len(), 1 + 2 * 10 + 1);
        assert!(l.iter().skip(1).step_by(2).all(|m| m.role == "user"));
    }

    #[test]
    fn render_appends_payload() {
        let m = render(TemplateKind::Linguistic, "dates.");
        assert_eq!(m.last().unwrap().content, "Concept: Words are dates.");
        let m = render(TemplateKind::Summarize, &words_payload(&words(&["May", "June"])));
        assert_eq!(m.last().unwrap().content, "Words: May, June.");
    }

    #[test]
    fn task_parsing() {
        assert_eq!(parse_tasks("daily writing").scenarios, [Scenario::Writing].into());
        assert_eq!(parse_tasks("coding; translation").scenarios, [Scenario::Coding, Scenario::Translation].into());
        let n = parse_tasks("None");
        assert!(n.none && n.scenarios.is_empty());
        assert_eq!(parse_tasks("poetry; Coding.").unparsed, vec!["poetry"]);
    }

    #[test]
    fn linguistic_parsing() {
        assert_eq!(parse_linguistic("semantic"), Some(Linguistic::Semantic));
        assert_eq!(parse_linguistic(" Phonology."), Some(Linguistic::Phonology));
        assert_eq!(parse_linguistic("it is hard to say"), None);
    }

    #[test]
    fn schedule_and_failure_detection() {
        let backend = FnBackend(|req: &ChatRequest, ctx: &RequestContext| {
            Ok(match ctx.template {
                TemplateKind::Summarize if ctx.repeat == 2 => "I cannot tell.".to_string(),
                TemplateKind::Summarize => "dates.".to_string(),
                TemplateKind::Tasks => "daily writing".to_string(),
                TemplateKind::Linguistic => {
                    assert_eq!(req.temperature, 0.0);
                    "Semantic".to_string()
                }
            })
        });
        let ann = Annotator::new(&backend, AnnotatorConfig { backoff_ms: 0, ..Default::default() });
        let a = ann.annotate_component(3, 1, &words(&["January", "March"])).unwrap();
        assert_eq!(a.descriptions()[0], "dates.");
        assert!(a.repeats[2].failed && a.repeats[2].tasks.is_none());
        assert_eq!(a.repeats[0].linguistic, Some(Linguistic::Semantic));
        let log = ann.audit_records();
        let temps: Vec<f64> = log
            .iter()
            .filter(|r| r.context.template == TemplateKind::Summarize)
            .map(|r| r.request.temperature)
            .collect();
        assert_eq!(temps, vec![0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(log.iter().filter(|r| r.context.template != TemplateKind::Summarize).all(|r| r.request.temperature == 0.0));
        assert!(log.iter().all(|r| r.request.top_p == 0.9));
    }

    #[test]
    fn retries_then_succeeds() {
        let calls = Mutex::new(0);
        let backend = FnBackend(|_: &ChatRequest, _: &RequestContext| {
            let mut c = calls.lock().unwrap();
            *c += 1;
            if *c < 3 {
                Err(Error::Backend("flaky".into()))
            } else {
                Ok("years.".to_string())
            }
        });
        let cfg = AnnotatorConfig { backoff_ms: 0, summarize_temperatures: vec![0.0], ..Default::default() };
        let ann = Annotator::new(&backend, cfg);
        let s = ann.summarize_concept(0, 1, &words(&["1950"])).unwrap();
        assert_eq!(s[0].1, "years.");
        assert_eq!(ann.audit_records()[0].attempts, 3);
        let backend = FnBackend(|_: &ChatRequest, _: &RequestContext| Err(Error::Backend("down".into())));
        let ann = Annotator::new(&backend, AnnotatorConfig { backoff_ms: 0, ..Default::default() });
        assert!(matches!(ann.summarize_concept(0, 1, &words(&["x"])), Err(Error::Backend(_))));
    }

    #[test]
    fn replay_round_trip() {
        let backend = FnBackend(|req: &ChatRequest, ctx: &RequestContext| {
            Ok(format!("{:?}-{}-{}", ctx.template, ctx.repeat, req.messages.len()))
        });
        let ann = Annotator::new(&backend, AnnotatorConfig { backoff_ms: 0, ..Default::default() });
        let live = ann.annotate_all(&[(0, 1, words(&["a"])), (1, 2, words(&["b", "c"]))]).unwrap();
        let fixture = ReplayFixture::from_audit(&ann.audit_records());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fx.json");
        fixture.save(&p).unwrap();
        let replay = ReplayBackend::new(ReplayFixture::load(&p).unwrap());
        let ann2 = Annotator::new(&replay, AnnotatorConfig { backoff_ms: 0, retries: 1, ..Default::default() });
        let again = ann2.annotate_all(&[(0, 1, words(&["a"])), (1, 2, words(&["b", "c"]))]).unwrap();
        assert_eq!(live, again);
        let audit = dir.path().join("audit.jsonl");
        ann2.write_audit(&audit).unwrap();
        assert_eq!(load_audit(&audit).unwrap(), ann2.audit_records());
        assert!(ann2.annotate_component(5, 5, &words(&["zzz"])).is_err());
    }

    #[test]
    fn completion_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"dates."}}]}"#;
        assert_eq!(parse_completion(body).unwrap(), "dates.");
        assert!(parse_completion("{}").is_err());
        assert!(parse_completion("nope").is_err());
    }
}
