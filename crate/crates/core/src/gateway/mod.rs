//! Text-generation and embedding backends behind two narrow traits, plus the
//! prompt templates, response parsers, retry policy, and in-flight bounding
//! that every stage shares.
//!
//! The deterministic mock backend serves all tests; the HTTP backend speaks
//! the common chat-completions/embeddings JSON shapes for real runs.

mod http;
mod mock;

pub use http::HttpBackend;
pub use mock::MockBackend;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::index::l2_normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateName {
    Item,
    Annotate,
    Query,
    Reflect,
}

impl TemplateName {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Item => "item",
            TemplateName::Annotate => "annotate",
            TemplateName::Query => "query",
            TemplateName::Reflect => "reflect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSchema {
    FreeText,
    QueryList,
    ReflectVerdict,
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub text: String,
    pub schema: OutputSchema,
}

/// The four templates the pipeline uses. Shipped as plain-text assets compiled
/// into the binary; `from_dir` hot-loads replacements without rebuilding.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub item: PromptTemplate,
    pub annotate: PromptTemplate,
    pub query: PromptTemplate,
    pub reflect: PromptTemplate,
}

impl PromptSet {
    pub fn builtin() -> Self {
        PromptSet {
            item: PromptTemplate {
                name: TemplateName::Item,
                text: include_str!("../../assets/prompts/item.txt").to_string(),
                schema: OutputSchema::FreeText,
            },
            annotate: PromptTemplate {
                name: TemplateName::Annotate,
                text: include_str!("../../assets/prompts/annotate.txt").to_string(),
                schema: OutputSchema::FreeText,
            },
            query: PromptTemplate {
                name: TemplateName::Query,
                text: include_str!("../../assets/prompts/query.txt").to_string(),
                schema: OutputSchema::QueryList,
            },
            reflect: PromptTemplate {
                name: TemplateName::Reflect,
                text: include_str!("../../assets/prompts/reflect.txt").to_string(),
                schema: OutputSchema::ReflectVerdict,
            },
        }
    }

    /// Loads item.txt / annotate.txt / query.txt / reflect.txt from `dir`.
    pub fn from_dir(dir: &std::path::Path) -> Result<Self> {
        let mut set = PromptSet::builtin();
        for (name, slot) in [
            (TemplateName::Item, &mut set.item),
            (TemplateName::Annotate, &mut set.annotate),
            (TemplateName::Query, &mut set.query),
            (TemplateName::Reflect, &mut set.reflect),
        ] {
            let path = dir.join(format!("{}.txt", name.as_str()));
            slot.text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        match name {
            TemplateName::Item => &self.item,
            TemplateName::Annotate => &self.annotate,
            TemplateName::Query => &self.query,
            TemplateName::Reflect => &self.reflect,
        }
    }
}

/// Substitutes `{name}` placeholders (name = [a-z_]+) from `bindings`.
/// Every placeholder present in the template must be bound; braces that do
/// not form a placeholder pass through literally, as does any brace content
/// introduced by substituted values (the scan runs over the template only).
pub fn render(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String> {
    let text = &template.text;
    let mut out = String::with_capacity(text.len());
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                let name = &text[i + 1..j];
                let value = bindings.get(name).ok_or_else(|| {
                    Error::Invalid(format!(
                        "unbound placeholder {{{name}}} in template {:?}",
                        template.name.as_str()
                    ))
                })?;
                out.push_str(value);
                i = j + 1;
                continue;
            }
        }
        // Take the full UTF-8 character starting here.
        let ch_len = text[i..].chars().next().map_or(1, char::len_utf8);
        out.push_str(&text[i..i + ch_len]);
        i += ch_len;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReflectVerdict {
    /// Verdict score in [0, 1]; finite out-of-range values are clamped at parse.
    pub score: f32,
    pub feedback: String,
    /// Always supplied by conforming backends; empty means "no refinement".
    pub refined_queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedPayload {
    FreeText(String),
    Queries(Vec<String>),
    Verdict(ReflectVerdict),
    /// The raw text did not conform to the schema even after retries.
    Failed { reason: String },
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub template: TemplateName,
    /// Fully rendered prompt (what an HTTP backend sends).
    pub prompt: String,
    /// The raw bindings (what the mock backend computes from).
    pub bindings: BTreeMap<String, String>,
    pub max_tokens: u32,
    /// Upper bound on queries for list-shaped outputs.
    pub query_limit: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationResponse {
    pub template: TemplateName,
    pub raw: String,
    pub payload: ParsedPayload,
    pub attempts: u32,
}

/// One query per non-empty line; numbered ("1.", "2)") and bulleted ("-",
/// "*") prefixes are stripped; output is capped at `limit`. Total: any string
/// either parses or returns a reason, never panics.
pub fn parse_query_list(raw: &str, limit: usize) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    for line in raw.lines() {
        let stripped = strip_list_prefix(line);
        if stripped.is_empty() {
            continue;
        }
        out.push(stripped.to_string());
        if out.len() == limit {
            break;
        }
    }
    if out.is_empty() {
        Err("no queries in response".to_string())
    } else {
        Ok(out)
    }
}

fn strip_list_prefix(line: &str) -> &str {
    let s = line.trim();
    // "1. query" / "12) query"
    let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return rest.trim();
        }
    }
    // "- query" / "* query" / "• query"
    for bullet in ["-", "*", "\u{2022}"] {
        if let Some(rest) = s.strip_prefix(bullet) {
            return rest.trim();
        }
    }
    s
}

/// Wire format: "SCORE: <float>" then a "FEEDBACK:" block then a "QUERIES:"
/// block (queries parsed like a query list, uncapped). Finite scores are
/// clamped into [0, 1]; a missing or non-finite score is a parse failure.
pub fn parse_reflect(raw: &str) -> std::result::Result<ReflectVerdict, String> {
    enum Section {
        Preamble,
        Feedback,
        Queries,
    }
    let mut score: Option<f32> = None;
    let mut feedback_lines: Vec<String> = Vec::new();
    let mut query_lines: Vec<String> = Vec::new();
    let mut section = Section::Preamble;

    for line in raw.lines() {
        let t = line.trim();
        if score.is_none() {
            if let Some(rest) = t.strip_prefix("SCORE:") {
                let value: f32 = rest.trim().parse().map_err(|_| {
                    format!("unparsable score {:?}", rest.trim())
                })?;
                if !value.is_finite() {
                    return Err(format!("non-finite score {value}"));
                }
                score = Some(value.clamp(0.0, 1.0));
                continue;
            }
        }
        if let Some(rest) = t.strip_prefix("FEEDBACK:") {
            section = Section::Feedback;
            if !rest.trim().is_empty() {
                feedback_lines.push(rest.trim().to_string());
            }
            continue;
        }
        if t.strip_prefix("QUERIES:").is_some() {
            section = Section::Queries;
            continue;
        }
        match section {
            Section::Preamble => {}
            Section::Feedback => {
                if !t.is_empty() {
                    feedback_lines.push(t.to_string());
                }
            }
            Section::Queries => {
                let stripped = strip_list_prefix(line);
                if !stripped.is_empty() {
                    query_lines.push(stripped.to_string());
                }
            }
        }
    }

    let score = score.ok_or_else(|| "missing SCORE line".to_string())?;
    Ok(ReflectVerdict {
        score,
        feedback: feedback_lines.join(" "),
        refined_queries: query_lines,
    })
}

/// Raw text generation; implementations must be deterministic for identical
/// requests (the mock is; HTTP backends are as deterministic as the service).
pub trait TextBackend: Send + Sync {
    fn generate_text(&self, req: &GenerationRequest) -> Result<String>;
    /// Stable identity string folded into augmentation cache keys.
    fn id(&self) -> String;
}

/// Raw embedding vectors; the gateway — not the backend — L2-normalizes, so
/// normalization happens exactly once on every path.
pub trait EmbedBackend: Send + Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
    fn dimension(&self) -> usize;
    fn id(&self) -> String;
}

/// Bounded retries with exponential backoff and full jitter. Jitter only
/// shapes sleep timing; it never influences any artifact.
#[derive(Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    jitter_state: AtomicU64,
}

impl Clone for RetryPolicy {
    fn clone(&self) -> Self {
        RetryPolicy {
            attempts: self.attempts,
            base_delay: self.base_delay,
            max_delay: self.max_delay,
            jitter_state: AtomicU64::new(self.jitter_state.load(AtomicOrdering::Relaxed)),
        }
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(10),
            jitter_state: AtomicU64::new(0x9E37_79B9_7F4A_7C15),
        }
    }
}

impl RetryPolicy {
    /// Millisecond-scale delays for tests.
    pub fn fast() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
            ..Default::default()
        }
    }

    fn next_u64(&self) -> u64 {
        // xorshift64*; kept local to avoid a runtime RNG dependency.
        self.jitter_state
            .fetch_update(AtomicOrdering::Relaxed, AtomicOrdering::Relaxed, |mut x| {
                x ^= x >> 12;
                x ^= x << 25;
                x ^= x >> 27;
                Some(x)
            })
            .unwrap()
            .wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Full-jitter delay for the given 1-based attempt: uniform in
    /// [0, min(base * 2^(attempt-1), max)].
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(20);
        let ceiling = self
            .base_delay
            .saturating_mul(1u32 << exp)
            .min(self.max_delay)
            .as_nanos() as u64;
        if ceiling == 0 {
            return Duration::ZERO;
        }
        Duration::from_nanos(self.next_u64() % ceiling)
    }

    fn sleep(&self, attempt: u32) {
        std::thread::sleep(self.delay(attempt));
    }
}

/// Caps the number of simultaneous in-flight backend calls.
#[derive(Debug)]
pub struct InflightLimiter {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        InflightLimiter { max: max.max(1), current: Mutex::new(0), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> InflightGuard<'_> {
        let mut current = self.current.lock().unwrap();
        while *current >= self.max {
            current = self.cv.wait(current).unwrap();
        }
        *current += 1;
        InflightGuard { limiter: self }
    }
}

pub struct InflightGuard<'a> {
    limiter: &'a InflightLimiter,
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut current = self.limiter.current.lock().unwrap();
        *current -= 1;
        self.limiter.cv.notify_one();
    }
}

fn max_tokens_for(name: TemplateName) -> u32 {
    match name {
        TemplateName::Item => 300,
        TemplateName::Annotate => 150,
        TemplateName::Query => 200,
        TemplateName::Reflect => 500,
    }
}

/// The single entry point the pipeline uses for generation and embedding:
/// renders prompts, bounds in-flight calls, retries transport failures,
/// parses responses per schema, normalizes and memoizes embeddings.
pub struct Gateway {
    text: Arc<dyn TextBackend>,
    embed: Arc<dyn EmbedBackend>,
    prompts: PromptSet,
    retry: RetryPolicy,
    limiter: InflightLimiter,
    embed_cache: Mutex<HashMap<String, Vec<f32>>>,
}

impl Gateway {
    pub fn new(
        text: Arc<dyn TextBackend>,
        embed: Arc<dyn EmbedBackend>,
        prompts: PromptSet,
        retry: RetryPolicy,
        max_inflight: usize,
    ) -> Self {
        Gateway {
            text,
            embed,
            prompts,
            retry,
            limiter: InflightLimiter::new(max_inflight),
            embed_cache: Mutex::new(HashMap::new()),
        }
    }

    /// Mock-backed gateway with built-in prompts and fast retries.
    pub fn mock(seed: u64, dim: usize, max_inflight: usize) -> Self {
        let backend = Arc::new(MockBackend::new(seed, dim));
        Gateway::new(
            backend.clone(),
            backend,
            PromptSet::builtin(),
            RetryPolicy::fast(),
            max_inflight,
        )
    }

    pub fn dimension(&self) -> usize {
        self.embed.dimension()
    }

    pub fn text_backend_id(&self) -> String {
        self.text.id()
    }

    pub fn embed_backend_id(&self) -> String {
        self.embed.id()
    }

    pub fn template_text(&self, name: TemplateName) -> &str {
        &self.prompts.get(name).text
    }

    /// Renders the named template with `bindings` and runs generation.
    /// Transport failures are retried and surface as `Err` when exhausted;
    /// parse failures are retried and surface as `Ok` with a
    /// [`ParsedPayload::Failed`] payload carrying the raw text.
    pub fn generate(
        &self,
        name: TemplateName,
        bindings: BTreeMap<String, String>,
        query_limit: usize,
    ) -> Result<GenerationResponse> {
        let template = self.prompts.get(name);
        let prompt = render(template, &bindings)?;
        let req = GenerationRequest {
            template: name,
            prompt,
            bindings,
            max_tokens: max_tokens_for(name),
            query_limit: query_limit.max(1),
        };

        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let raw = {
                let _permit = self.limiter.acquire();
                self.text.generate_text(&req)
            };
            match raw {
                Ok(raw) => {
                    let parsed: std::result::Result<ParsedPayload, String> = match template.schema
                    {
                        OutputSchema::FreeText => {
                            let t = raw.trim();
                            if t.is_empty() {
                                Err("empty response".to_string())
                            } else {
                                Ok(ParsedPayload::FreeText(t.to_string()))
                            }
                        }
                        OutputSchema::QueryList => {
                            parse_query_list(&raw, req.query_limit).map(ParsedPayload::Queries)
                        }
                        OutputSchema::ReflectVerdict => parse_reflect(&raw).map(|mut v| {
                            v.refined_queries.truncate(req.query_limit);
                            ParsedPayload::Verdict(v)
                        }),
                    };
                    match parsed {
                        Ok(payload) => {
                            return Ok(GenerationResponse { template: name, raw, payload, attempts: attempt })
                        }
                        Err(_) if attempt < self.retry.attempts => {
                            self.retry.sleep(attempt);
                        }
                        Err(reason) => {
                            return Ok(GenerationResponse {
                                template: name,
                                raw,
                                payload: ParsedPayload::Failed { reason },
                                attempts: attempt,
                            })
                        }
                    }
                }
                Err(e) if attempt < self.retry.attempts => {
                    let _ = e;
                    self.retry.sleep(attempt);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Embeds each text to a unit-norm vector of the backend dimension.
    /// Identical texts always yield identical vectors (memoized).
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.is_empty() {
            return Err(Error::Invalid("embed called with no texts".to_string()));
        }
        if let Some(bad) = texts.iter().position(|t| t.is_empty()) {
            return Err(Error::Invalid(format!("embed text #{bad} is empty")));
        }

        let mut results: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        let mut misses: Vec<usize> = Vec::new();
        {
            let cache = self.embed_cache.lock().unwrap();
            for (i, t) in texts.iter().enumerate() {
                match cache.get(t) {
                    Some(v) => results[i] = Some(v.clone()),
                    None => misses.push(i),
                }
            }
        }
        if !misses.is_empty() {
            let miss_texts: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            let raw = self.embed_with_retry(&miss_texts)?;
            if raw.len() != miss_texts.len() {
                return Err(Error::Gateway(format!(
                    "backend returned {} embeddings for {} texts",
                    raw.len(),
                    miss_texts.len()
                )));
            }
            let expected = self.embed.dimension();
            let mut cache = self.embed_cache.lock().unwrap();
            for (&i, mut v) in misses.iter().zip(raw) {
                if v.len() != expected {
                    return Err(Error::DimensionMismatch { expected, got: v.len() });
                }
                if !l2_normalize(&mut v) {
                    return Err(Error::Gateway(format!(
                        "embedding for text {:?} has zero norm",
                        crate::text::truncate_tokens(&texts[i], 8)
                    )));
                }
                cache.insert(texts[i].clone(), v.clone());
                results[i] = Some(v);
            }
        }
        Ok(results.into_iter().map(|v| v.expect("all slots filled")).collect())
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.embed(std::slice::from_ref(&text.to_string()))?.remove(0))
    }

    fn embed_with_retry(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                self.embed.embed_batch(texts)
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.retry.attempts => {
                    let _ = e;
                    self.retry.sleep(attempt);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Test-oriented wrapper injecting failures or canned responses into an inner
/// backend. Rules are consumed in order, each up to `remaining` times.
pub struct FaultInjector<B> {
    inner: B,
    text_rules: Mutex<Vec<FaultRule>>,
    embed_rules: Mutex<Vec<EmbedFaultRule>>,
}

#[derive(Debug, Clone)]
pub enum FaultAction {
    TransportError(String),
    Respond(String),
}

#[derive(Debug, Clone)]
pub struct FaultRule {
    /// None matches every template.
    pub template: Option<TemplateName>,
    /// Additional substring filter on the rendered prompt.
    pub prompt_contains: Option<String>,
    pub remaining: u32,
    pub action: FaultAction,
}

#[derive(Debug, Clone)]
pub struct EmbedFaultRule {
    pub text_contains: String,
    pub remaining: u32,
}

impl<B> FaultInjector<B> {
    pub fn new(inner: B) -> Self {
        FaultInjector {
            inner,
            text_rules: Mutex::new(Vec::new()),
            embed_rules: Mutex::new(Vec::new()),
        }
    }

    pub fn with_text_rule(self, rule: FaultRule) -> Self {
        self.text_rules.lock().unwrap().push(rule);
        self
    }

    pub fn with_embed_rule(self, rule: EmbedFaultRule) -> Self {
        self.embed_rules.lock().unwrap().push(rule);
        self
    }
}

impl<B: TextBackend> TextBackend for FaultInjector<B> {
    fn generate_text(&self, req: &GenerationRequest) -> Result<String> {
        let mut rules = self.text_rules.lock().unwrap();
        for rule in rules.iter_mut() {
            if rule.remaining == 0 {
                continue;
            }
            if let Some(t) = rule.template {
                if t != req.template {
                    continue;
                }
            }
            if let Some(s) = &rule.prompt_contains {
                if !req.prompt.contains(s.as_str()) {
                    continue;
                }
            }
            rule.remaining -= 1;
            return match &rule.action {
                FaultAction::TransportError(msg) => Err(Error::Gateway(msg.clone())),
                FaultAction::Respond(raw) => Ok(raw.clone()),
            };
        }
        drop(rules);
        self.inner.generate_text(req)
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

impl<B: EmbedBackend> EmbedBackend for FaultInjector<B> {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut rules = self.embed_rules.lock().unwrap();
        for rule in rules.iter_mut() {
            if rule.remaining == 0 {
                continue;
            }
            if texts.iter().any(|t| t.contains(rule.text_contains.as_str())) {
                rule.remaining -= 1;
                return Err(Error::Gateway(format!(
                    "injected embed failure on {:?}",
                    rule.text_contains
                )));
            }
        }
        drop(rules);
        self.inner.embed_batch(texts)
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

/// Test-oriented wrapper counting calls per template and tracking the peak
/// number of simultaneous in-flight backend calls.
pub struct InstrumentedBackend<B> {
    inner: B,
    calls: Mutex<BTreeMap<TemplateName, u64>>,
    embed_calls: AtomicU64,
    inflight: AtomicUsize,
    peak_inflight: AtomicUsize,
}

impl<B> InstrumentedBackend<B> {
    pub fn new(inner: B) -> Self {
        InstrumentedBackend {
            inner,
            calls: Mutex::new(BTreeMap::new()),
            embed_calls: AtomicU64::new(0),
            inflight: AtomicUsize::new(0),
            peak_inflight: AtomicUsize::new(0),
        }
    }

    pub fn calls_for(&self, name: TemplateName) -> u64 {
        *self.calls.lock().unwrap().get(&name).unwrap_or(&0)
    }

    pub fn embed_calls(&self) -> u64 {
        self.embed_calls.load(AtomicOrdering::Relaxed)
    }

    pub fn peak_inflight(&self) -> usize {
        self.peak_inflight.load(AtomicOrdering::Relaxed)
    }

    fn enter(&self) -> usize {
        let now = self.inflight.fetch_add(1, AtomicOrdering::SeqCst) + 1;
        self.peak_inflight.fetch_max(now, AtomicOrdering::SeqCst);
        now
    }

    fn exit(&self) {
        self.inflight.fetch_sub(1, AtomicOrdering::SeqCst);
    }
}

impl<B: TextBackend> TextBackend for InstrumentedBackend<B> {
    fn generate_text(&self, req: &GenerationRequest) -> Result<String> {
        *self.calls.lock().unwrap().entry(req.template).or_insert(0) += 1;
        self.enter();
        let out = self.inner.generate_text(req);
        self.exit();
        out
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

impl<B: EmbedBackend> EmbedBackend for InstrumentedBackend<B> {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        self.embed_calls.fetch_add(1, AtomicOrdering::Relaxed);
        self.enter();
        let out = self.inner.embed_batch(texts);
        self.exit();
        out
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn render_substitutes_and_reports_unbound() {
        let t = PromptTemplate {
            name: TemplateName::Item,
            text: "a {metadata} b {metadata} c".to_string(),
            schema: OutputSchema::FreeText,
        };
        let got = render(&t, &bindings(&[("metadata", "X")])).unwrap();
        assert_eq!(got, "a X b X c");
        let err = render(&t, &bindings(&[])).unwrap_err();
        assert!(err.to_string().contains("metadata"));
    }

    #[test]
    fn render_leaves_non_placeholder_braces() {
        let t = PromptTemplate {
            name: TemplateName::Item,
            text: "json {{ \"k\": 1 }} and {UPPER} and {x}".to_string(),
            schema: OutputSchema::FreeText,
        };
        let got = render(&t, &bindings(&[("x", "V")])).unwrap();
        assert_eq!(got, "json {{ \"k\": 1 }} and {UPPER} and V");
    }

    #[test]
    fn builtin_templates_render_with_documented_bindings() {
        let set = PromptSet::builtin();
        render(&set.item, &bindings(&[("metadata", "m")])).unwrap();
        render(&set.annotate, &bindings(&[("user", "u"), ("items", "i")])).unwrap();
        render(&set.query, &bindings(&[("query", "q"), ("motives", "m"), ("limit", "4")]))
            .unwrap();
        render(
            &set.reflect,
            &bindings(&[("query", "q"), ("motives", "m"), ("candidates", "c")]),
        )
        .unwrap();
    }

    #[test]
    fn query_list_strips_prefixes_and_caps() {
        let raw = "1. alpha beta\n2) gamma\n- delta\n* epsilon\n\n3. zeta";
        let got = parse_query_list(raw, 4).unwrap();
        assert_eq!(got, vec!["alpha beta", "gamma", "delta", "epsilon"]);
        assert!(parse_query_list("\n\n", 4).is_err());
    }

    #[test]
    fn reflect_parses_wire_format() {
        let raw = "SCORE: 0.25\nFEEDBACK: missing war films\nQUERIES:\n1. war drama\n2. battlefield epic\n";
        let v = parse_reflect(raw).unwrap();
        assert_eq!(v.score, 0.25);
        assert_eq!(v.feedback, "missing war films");
        assert_eq!(v.refined_queries, vec!["war drama", "battlefield epic"]);
    }

    #[test]
    fn reflect_clamps_finite_scores_rejects_others() {
        assert_eq!(parse_reflect("SCORE: 1.7\nQUERIES:\n1. q").unwrap().score, 1.0);
        assert_eq!(parse_reflect("SCORE: -3\nQUERIES:\n1. q").unwrap().score, 0.0);
        assert!(parse_reflect("SCORE: NaN\nQUERIES:\n1. q").is_err());
        assert!(parse_reflect("SCORE: inf\nQUERIES:\n1. q").is_err());
        assert!(parse_reflect("no score here").is_err());
    }

    #[test]
    fn reflect_tolerates_missing_queries_section() {
        let v = parse_reflect("SCORE: 0.9\nFEEDBACK: fine").unwrap();
        assert!(v.refined_queries.is_empty());
    }

    #[test]
    fn gateway_surfaces_parse_failure_with_raw_text() {
        struct Garbage;
        impl TextBackend for Garbage {
            fn generate_text(&self, _req: &GenerationRequest) -> Result<String> {
                Ok("not a verdict".to_string())
            }
            fn id(&self) -> String {
                "garbage".to_string()
            }
        }
        let gw = Gateway::new(
            Arc::new(Garbage),
            Arc::new(MockBackend::new(1, 16)),
            PromptSet::builtin(),
            RetryPolicy::fast(),
            2,
        );
        let resp = gw
            .generate(
                TemplateName::Reflect,
                bindings(&[("query", "q"), ("motives", "m"), ("candidates", "c")]),
                4,
            )
            .unwrap();
        assert_eq!(resp.raw, "not a verdict");
        assert_eq!(resp.attempts, 3, "parse failures are retried before surfacing");
        assert!(matches!(resp.payload, ParsedPayload::Failed { .. }));
    }

    #[test]
    fn gateway_errs_after_transport_retries_exhaust() {
        let inner = MockBackend::new(1, 16);
        let faulty = FaultInjector::new(inner).with_text_rule(FaultRule {
            template: Some(TemplateName::Item),
            prompt_contains: None,
            remaining: u32::MAX,
            action: FaultAction::TransportError("down".to_string()),
        });
        let gw = Gateway::new(
            Arc::new(faulty),
            Arc::new(MockBackend::new(1, 16)),
            PromptSet::builtin(),
            RetryPolicy::fast(),
            2,
        );
        let err = gw.generate(TemplateName::Item, bindings(&[("metadata", "title: X")]), 1);
        assert!(matches!(err, Err(Error::Gateway(_))));
    }

    #[test]
    fn transient_transport_failure_recovers_within_retries() {
        let inner = MockBackend::new(1, 16);
        let faulty = FaultInjector::new(inner).with_text_rule(FaultRule {
            template: Some(TemplateName::Item),
            prompt_contains: None,
            remaining: 2,
            action: FaultAction::TransportError("blip".to_string()),
        });
        let gw = Gateway::new(
            Arc::new(faulty),
            Arc::new(MockBackend::new(1, 16)),
            PromptSet::builtin(),
            RetryPolicy::fast(),
            2,
        );
        let resp =
            gw.generate(TemplateName::Item, bindings(&[("metadata", "title: X")]), 1).unwrap();
        assert_eq!(resp.attempts, 3);
        assert!(matches!(resp.payload, ParsedPayload::FreeText(_)));
    }

    #[test]
    fn embed_rejects_empty_inputs() {
        let gw = Gateway::mock(1, 16, 2);
        assert!(gw.embed(&[]).is_err());
        assert!(gw.embed(&["".to_string()]).is_err());
    }

    #[test]
    fn embed_memoization_returns_identical_vectors() {
        let gw = Gateway::mock(1, 16, 2);
        let a = gw.embed_one("war drama").unwrap();
        let b = gw.embed_one("war drama").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn limiter_blocks_above_max() {
        let limiter = Arc::new(InflightLimiter::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let limiter = limiter.clone();
            let active = active.clone();
            let peak = peak.clone();
            handles.push(std::thread::spawn(move || {
                let _g = limiter.acquire();
                let now = active.fetch_add(1, AtomicOrdering::SeqCst) + 1;
                peak.fetch_max(now, AtomicOrdering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                active.fetch_sub(1, AtomicOrdering::SeqCst);
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(AtomicOrdering::SeqCst) <= 2);
    }

    #[test]
    fn retry_delay_is_bounded() {
        let p = RetryPolicy::fast();
        for attempt in 1..=5 {
            let d = p.delay(attempt);
            assert!(d <= p.max_delay);
        }
    }
}
