//! Text generation and token scoring backends.
//!
//! Two slots exist: a [`Generator`] that produces drafts and final bodies, and
//! a [`Scorer`] that returns per-token log-probabilities of a continuation.
//! Both have an HTTP implementation and a deterministic fixture-driven mock.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::confidence::{ConfidenceVerdict, TokenLogProbs};
use crate::lexer;
use crate::pyast;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 10_000;
pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub stop: Vec<String>,
    pub model: String,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, model: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            temperature: 0.0,
            stop: Vec::new(),
            model: model.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("prompt exceeds the model context window: {0}")]
    ContextOverflow(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("nothing to score: continuation is empty")]
    EmptyDraft,
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        matches!(self, BackendError::Unreachable(_))
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError>;
    /// Stable identifier recorded in results.
    fn id(&self) -> String;
}

pub trait Scorer: Send + Sync {
    /// Log-probabilities of `continuation` given `context`. Token texts
    /// concatenate to `continuation`.
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<TokenLogProbs, BackendError>;
    fn id(&self) -> String;
}

/// Rough token count used for budgets and the mock context window.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// A secret that never shows up in `Debug` output.
#[derive(Clone)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        ApiKey(key.into())
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()).map(ApiKey)
    }

    /// Replaces every occurrence of the key in `text`.
    pub fn scrub(&self, text: &str) -> String {
        if self.0.is_empty() {
            text.to_string()
        } else {
            text.replace(&self.0, "[REDACTED]")
        }
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey([REDACTED])")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, initial_backoff_ms: 500, timeout_secs: 300 }
    }
}

impl RetryPolicy {
    /// Runs `attempt` until it succeeds, fails permanently, or the retries
    /// are used up. The wait doubles after each transient failure.
    pub fn run<T>(&self, mut attempt: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut wait = Duration::from_millis(self.initial_backoff_ms);
        let mut tries = 0;
        loop {
            match attempt() {
                Err(e) if e.is_transient() && tries < self.max_retries => {
                    tries += 1;
                    log::warn!("transient backend failure (retry {tries}/{}): {e}", self.max_retries);
                    std::thread::sleep(wait);
                    wait = wait.saturating_mul(2);
                }
                Err(BackendError::Unreachable(msg)) if tries > 0 => {
                    return Err(BackendError::Unreachable(format!("{msg} (after {tries} retries)")))
                }
                other => return other,
            }
        }
    }
}

fn http_client(timeout_secs: u64) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(timeout_secs))
        .build()
        .expect("HTTP client construction only fails on TLS backend initialisation")
}

/// Sends a JSON POST and maps transport and status failures onto [`BackendError`].
fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    key: Option<&ApiKey>,
    body: &Value,
) -> Result<Value, BackendError> {
    let scrub = |s: String| key.map_or_else(|| s.clone(), |k| k.scrub(&s));
    let mut req = client.post(url).json(body);
    if let Some(k) = key {
        req = req.bearer_auth(&k.0);
    }
    log::debug!("POST {url} ({} bytes)", body.to_string().len());
    let resp = req.send().map_err(|e| BackendError::Unreachable(scrub(e.to_string())))?;
    let status = resp.status();
    let text = resp.text().map_err(|e| BackendError::Unreachable(scrub(e.to_string())))?;
    let detail = scrub(format!("HTTP {}: {}", status.as_u16(), truncate(&text, 500)));
    log::debug!("response from {url}: HTTP {}", status.as_u16());
    match status.as_u16() {
        200..=299 => serde_json::from_str(&text).map_err(|e| BackendError::InvalidResponse(format!("{e}: {detail}"))),
        401 | 403 => Err(BackendError::AuthFailure(detail)),
        413 => Err(BackendError::ContextOverflow(detail)),
        400 if looks_like_context_overflow(&text) => Err(BackendError::ContextOverflow(detail)),
        408 | 429 | 500..=599 => Err(BackendError::Unreachable(detail)),
        _ => Err(BackendError::InvalidResponse(detail)),
    }
}

fn looks_like_context_overflow(body: &str) -> bool {
    let b = body.to_ascii_lowercase();
    ["context_length", "context length", "maximum context", "too many tokens", "context window"]
        .iter()
        .any(|p| b.contains(p))
}

fn truncate(s: &str, max_chars: usize) -> &str {
    s.char_indices().nth(max_chars).map_or(s, |(i, _)| &s[..i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    #[default]
    Chat,
    Completions,
}

/// Client for OpenAI-compatible `chat/completions` or `completions` endpoints.
#[derive(Debug, Clone)]
pub struct OpenAiClient {
    pub base_url: String,
    pub model: String,
    pub style: ApiStyle,
    pub system_preamble: Option<String>,
    pub retry: RetryPolicy,
    key: Option<ApiKey>,
    http: reqwest::blocking::Client,
}

impl OpenAiClient {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, key: Option<ApiKey>, retry: RetryPolicy) -> Self {
        OpenAiClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            style: ApiStyle::Chat,
            system_preamble: None,
            retry,
            key,
            http: http_client(retry.timeout_secs),
        }
    }

    fn model_for<'a>(&'a self, req: &'a GenerationRequest) -> &'a str {
        if req.model.is_empty() {
            &self.model
        } else {
            &req.model
        }
    }
}

impl Generator for OpenAiClient {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        let mut body = json!({
            "model": self.model_for(req),
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if !req.stop.is_empty() {
            body["stop"] = json!(req.stop);
        }
        let url = match self.style {
            ApiStyle::Chat => {
                let mut messages = Vec::new();
                if let Some(sys) = &self.system_preamble {
                    messages.push(json!({"role": "system", "content": sys}));
                }
                messages.push(json!({"role": "user", "content": req.prompt}));
                body["messages"] = Value::Array(messages);
                format!("{}/chat/completions", self.base_url)
            }
            ApiStyle::Completions => {
                body["prompt"] = json!(req.prompt);
                format!("{}/completions", self.base_url)
            }
        };
        let resp = self.retry.run(|| post_json(&self.http, &url, self.key.as_ref(), &body))?;
        let choice = &resp["choices"][0];
        let text = match self.style {
            ApiStyle::Chat => choice["message"]["content"].as_str(),
            ApiStyle::Completions => choice["text"].as_str(),
        };
        text.map(str::to_string).ok_or_else(|| BackendError::InvalidResponse("response has no choices[0] text".into()))
    }

    fn id(&self) -> String {
        format!("openai:{}", self.model)
    }
}

/// Scores a continuation through a `completions` endpoint that echoes prompt
/// log-probabilities (`echo: true, max_tokens: 0`).
#[derive(Debug, Clone)]
pub struct OpenAiEchoScorer {
    pub client: OpenAiClient,
}

impl Scorer for OpenAiEchoScorer {
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<TokenLogProbs, BackendError> {
        if continuation.is_empty() {
            return Err(BackendError::EmptyDraft);
        }
        let c = &self.client;
        let body = json!({
            "model": c.model,
            "prompt": format!("{context}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let url = format!("{}/completions", c.base_url);
        let resp = c.retry.run(|| post_json(&c.http, &url, c.key.as_ref(), &body))?;
        let lp = &resp["choices"][0]["logprobs"];
        let bad = |what: &str| BackendError::InvalidResponse(format!("echo logprobs missing {what}"));
        let tokens = lp["tokens"].as_array().ok_or_else(|| bad("tokens"))?;
        let values = lp["token_logprobs"].as_array().ok_or_else(|| bad("token_logprobs"))?;
        let offsets = lp["text_offset"].as_array().ok_or_else(|| bad("text_offset"))?;
        let boundary = context.len();
        let (mut out_tokens, mut out_lps) = (Vec::new(), Vec::new());
        for ((tok, val), off) in tokens.iter().zip(values).zip(offsets) {
            let (Some(tok), Some(off)) = (tok.as_str(), off.as_u64()) else { return Err(bad("token text")) };
            let off = off as usize;
            if off + tok.len() <= boundary {
                continue;
            }
            let Some(val) = val.as_f64() else { return Err(bad("a log-probability")) };
            let piece = if off < boundary { tok.get(boundary - off..).unwrap_or("") } else { tok };
            out_tokens.push(piece.to_string());
            out_lps.push(val.min(0.0));
        }
        if out_tokens.concat() != continuation {
            return Err(BackendError::InvalidResponse("echoed tokens do not reproduce the continuation".into()));
        }
        TokenLogProbs::new(out_tokens, out_lps, self.id()).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }

    fn id(&self) -> String {
        format!("openai-echo:{}", self.client.model)
    }
}

/// Client for the scoring sidecar: `POST /score {context, continuation}`.
#[derive(Debug, Clone)]
pub struct SidecarScorer {
    pub base_url: String,
    pub retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarResponse {
    tokens: Vec<String>,
    logprobs: Vec<f64>,
    #[serde(default)]
    model: Option<String>,
}

impl SidecarScorer {
    pub fn new(base_url: impl Into<String>, retry: RetryPolicy) -> Self {
        SidecarScorer {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            retry,
            http: http_client(retry.timeout_secs),
        }
    }

    /// `GET /health`. A sidecar that is still loading answers 503, reported as
    /// [`BackendError::Unreachable`].
    pub fn health(&self) -> Result<SidecarHealth, BackendError> {
        let url = format!("{}/health", self.base_url);
        let resp = self.http.get(&url).send().map_err(|e| BackendError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Unreachable(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| BackendError::InvalidResponse(format!("{e}: {text}"))),
            _ => Err(BackendError::Unreachable(format!("HTTP {status}: {}", truncate(&text, 500)))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarHealth {
    pub status: String,
    #[serde(default)]
    pub model: Option<String>,
}

impl Scorer for SidecarScorer {
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<TokenLogProbs, BackendError> {
        if continuation.is_empty() {
            return Err(BackendError::EmptyDraft);
        }
        let url = format!("{}/score", self.base_url);
        let body = json!({"context": context, "continuation": continuation});
        let raw = self.retry.run(|| post_json(&self.http, &url, None, &body))?;
        let resp: SidecarResponse =
            serde_json::from_value(raw).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let id = resp.model.map_or_else(|| self.id(), |m| format!("sidecar:{m}"));
        TokenLogProbs::new(resp.tokens, resp.logprobs, id).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }

    fn id(&self) -> String {
        format!("sidecar:{}", self.base_url)
    }
}

/// Which error a mock rule injects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectedError {
    Unreachable,
    ContextOverflow,
    AuthFailure,
    InvalidResponse,
}

impl InjectedError {
    fn into_error(self, what: &str) -> BackendError {
        let msg = format!("injected by mock rule matching `{what}`");
        match self {
            InjectedError::Unreachable => BackendError::Unreachable(msg),
            InjectedError::ContextOverflow => BackendError::ContextOverflow(msg),
            InjectedError::AuthFailure => BackendError::AuthFailure(msg),
            InjectedError::InvalidResponse => BackendError::InvalidResponse(msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: String,
    /// Further substrings that must all be present too.
    #[serde(default)]
    pub all_of: Vec<String>,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub error: Option<InjectedError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScoreRule {
    /// Matched against the continuation.
    pub contains: String,
    #[serde(default)]
    pub logprob: Option<f64>,
    #[serde(default)]
    pub error: Option<InjectedError>,
}

/// Fixture for [`MockBackend`]. Generation looks up the prompt's SHA-256 in
/// `responses`, then tries `rules` in order (first substring match wins), then
/// falls back to `default_response`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockFixture {
    pub seed: u64,
    pub context_window: Option<usize>,
    pub responses: BTreeMap<String, String>,
    pub rules: Vec<MockRule>,
    pub default_response: Option<String>,
    pub score_rules: Vec<MockScoreRule>,
    /// Per-token log-probability when no score rule matches. Without it a
    /// value in `[-1.01, -0.01]` is derived from a hash of the token.
    pub default_logprob: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub fixture: MockFixture,
}

impl MockBackend {
    pub fn new(fixture: MockFixture) -> Self {
        MockBackend { fixture }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidResponse(format!("cannot read mock fixture {}: {e}", path.display())))?;
        let fixture = serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidResponse(format!("bad mock fixture {}: {e}", path.display())))?;
        Ok(MockBackend { fixture })
    }

    fn hashed_logprob(&self, context: &str, index: usize, token: &str) -> f64 {
        let mut h = Sha256::new();
        h.update(self.fixture.seed.to_le_bytes());
        h.update((context.len() as u64).to_le_bytes());
        h.update((index as u64).to_le_bytes());
        h.update(token.as_bytes());
        let d = h.finalize();
        let v = u16::from_le_bytes([d[0], d[1]]) % 1001;
        -0.01 - f64::from(v) / 1000.0
    }
}

impl Generator for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        if let Some(window) = self.fixture.context_window {
            let need = estimate_tokens(&req.prompt);
            if need > window {
                return Err(BackendError::ContextOverflow(format!("{need} tokens > window of {window}")));
            }
        }
        if let Some(r) = self.fixture.responses.get(&prompt_hash(&req.prompt)) {
            return Ok(r.clone());
        }
        for rule in &self.fixture.rules {
            if req.prompt.contains(&rule.contains) && rule.all_of.iter().all(|s| req.prompt.contains(s)) {
                if let Some(e) = rule.error {
                    return Err(e.into_error(&rule.contains));
                }
                if let Some(r) = &rule.response {
                    return Ok(r.clone());
                }
            }
        }
        self.fixture
            .default_response
            .clone()
            .ok_or_else(|| BackendError::InvalidResponse("mock has no response for this prompt".into()))
    }

    fn id(&self) -> String {
        format!("mock:{}", self.fixture.seed)
    }
}

impl Scorer for MockBackend {
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<TokenLogProbs, BackendError> {
        if continuation.is_empty() {
            return Err(BackendError::EmptyDraft);
        }
        let mut fixed = self.fixture.default_logprob;
        for rule in &self.fixture.score_rules {
            if continuation.contains(&rule.contains) {
                if let Some(e) = rule.error {
                    return Err(e.into_error(&rule.contains));
                }
                if rule.logprob.is_some() {
                    fixed = rule.logprob;
                    break;
                }
            }
        }
        let tokens: Vec<String> = lexer::split_lossless(continuation).into_iter().map(str::to_string).collect();
        let logprobs = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| fixed.unwrap_or_else(|| self.hashed_logprob(context, i, t)))
            .collect();
        TokenLogProbs::new(tokens, logprobs, Scorer::id(self)).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }

    fn id(&self) -> String {
        format!("mock:{}", self.fixture.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("response contains no fenced code block")]
    NoCode,
}

/// The stage-one output: a draft body and the callees the model says it uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftArtifact {
    pub body: String,
    pub predicted_callees: Vec<String>,
    pub raw_response: String,
    pub token_logprobs: Option<TokenLogProbs>,
    pub verdict: Option<ConfidenceVerdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

struct Fence<'a> {
    content: &'a str,
}

/// Fenced blocks in order; an unclosed final fence runs to the end.
fn fences(raw: &str) -> Vec<Fence<'_>> {
    let mut out = Vec::new();
    let mut pos = 0;
    let mut open: Option<usize> = None;
    for line in raw.split_inclusive('\n') {
        let start = pos;
        pos += line.len();
        if !line.trim_start().starts_with("```") {
            continue;
        }
        match open.take() {
            None => open = Some(pos),
            Some(from) => out.push(Fence { content: &raw[from..start] }),
        }
    }
    if let Some(from) = open {
        out.push(Fence { content: &raw[from..] });
    }
    out
}

fn outside_fences(raw: &str) -> Vec<&str> {
    let mut inside = false;
    let mut out = Vec::new();
    for line in raw.lines() {
        if line.trim_start().starts_with("```") {
            inside = !inside;
        } else if !inside {
            out.push(line);
        }
    }
    out
}

/// Keeps identifier-shaped names; `mod.func` and `func()` become `func`.
fn clean_callee(name: &str) -> Option<String> {
    let name = name.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`').trim_end_matches("()");
    let last = name.rsplit('.').next()?.trim();
    lexer::is_identifier(last).then(|| last.to_string())
}

fn parse_name_list(s: &str) -> Option<Vec<String>> {
    let s = s.trim();
    if let Ok(v) = serde_json::from_str::<Vec<String>>(s) {
        return Some(v);
    }
    let inner = s.strip_prefix('[').and_then(|x| x.strip_suffix(']')).unwrap_or(s);
    let items: Vec<String> = inner.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
    (!items.is_empty()).then_some(items)
}

fn predicted_callees(raw: &str) -> Vec<String> {
    let lines = outside_fences(raw);
    let labelled = lines.iter().rev().find_map(|l| {
        let t = l.trim().trim_start_matches(['*', '-', ' ']);
        let upper = t.get(..8)?.to_ascii_uppercase();
        (upper == "CALLEES:").then(|| parse_name_list(&t[8..]).unwrap_or_default())
    });
    let names = labelled.or_else(|| {
        lines.iter().rev().find_map(|l| serde_json::from_str::<Vec<String>>(l.trim()).ok().filter(|v| !v.is_empty()))
    });
    let mut out: Vec<String> = Vec::new();
    for n in names.unwrap_or_default() {
        if let Some(c) = clean_callee(&n) {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

/// Extracts the first fenced block as the draft body and the `CALLEES:` list.
pub fn parse_draft_response(raw: &str) -> Result<DraftArtifact, ParseError> {
    let blocks = fences(raw);
    let first = blocks.first().ok_or(ParseError::NoCode)?;
    let mut warnings = Vec::new();
    if blocks.len() > 1 {
        warnings.push(format!("response has {} code blocks; using the first", blocks.len()));
    }
    Ok(DraftArtifact {
        body: pyast::dedent(first.content).trim_matches('\n').to_string(),
        predicted_callees: predicted_callees(raw),
        raw_response: raw.to_string(),
        token_logprobs: None,
        verdict: None,
        warnings,
    })
}

/// Like [`parse_draft_response`], but when the block holds a full
/// `def target(...)` only its body is kept.
pub fn parse_draft_for(raw: &str, target_simple_name: &str) -> Result<DraftArtifact, ParseError> {
    let mut d = parse_draft_response(raw)?;
    d.body = pyast::function_body_of(&d.body, target_simple_name);
    Ok(d)
}
