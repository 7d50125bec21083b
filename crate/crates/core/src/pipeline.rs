//! The three-stage pipeline: draft, context inlining and retrieval, final generation.
//!
//! Every stage failure degrades instead of aborting the task:
//! a draft that cannot be produced or parsed runs the draft-free variant
//! (raw callers only), a scorer failure counts as low confidence, and a call
//! site that cannot be inlined contributes its caller verbatim.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    parse_draft_for, ApiKey, ApiStyle, BackendError, DraftArtifact, GenerationRequest, Generator, MockBackend,
    OpenAiClient, OpenAiEchoScorer, RetryPolicy, Scorer, SidecarScorer, DEFAULT_MAX_OUTPUT_TOKENS,
};
use crate::callgraph::{build_call_graph, CallGraph};
use crate::confidence::{bucket_with, perplexity, ConfidenceLevel, Thresholds};
use crate::inline::{inline_draft_into_callers, select_callers, InlineMode, InlineOptions, TargetSpec};
use crate::prompt::{
    body_indent, build_base_prompt, build_draft_prompt, build_final_prompt, downstream_entries, FinalParts, PromptBundle,
    Templates, Truncation,
};
use crate::pyast;
use crate::retrieval::{extract_ast_queries, merge_queries, retrieve_callees, QuerySet};
use crate::source::{index_repository, Repository};
use crate::task::{resolve_target, TaskFormat, TaskRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Fixture-driven offline backend.
    Mock {
        #[serde(default)]
        fixture: Option<PathBuf>,
    },
    /// OpenAI-compatible generation endpoint.
    Openai {
        base_url: String,
        model: String,
        #[serde(default)]
        style: ApiStyle,
        #[serde(default)]
        system_preamble: Option<String>,
    },
    /// Scoring through a `completions` endpoint that echoes prompt logprobs.
    OpenaiEcho { base_url: String, model: String },
    /// The scoring sidecar.
    Sidecar { base_url: String },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock { fixture: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    /// Token budget for the final prompt (estimated at four characters per token).
    pub prompt_tokens: usize,
    pub max_output_tokens: u32,
    /// Distinct callers to inline into.
    pub inline_callers: usize,
    pub retrieved_functions: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            prompt_tokens: 16_000,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            inline_callers: 5,
            retrieved_functions: 20,
        }
    }
}

/// The five ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_upstream: bool,
    pub no_inline: bool,
    pub no_downstream: bool,
    pub no_confidence: bool,
    pub no_draft: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub generator: BackendConfig,
    pub estimator: BackendConfig,
    pub retry: RetryPolicy,
    pub budgets: Budgets,
    pub confidence: Thresholds,
    pub inline_mode: InlineMode,
    pub max_concurrency: usize,
    pub task_format: TaskFormat,
    pub repos_root: PathBuf,
    pub include: Vec<String>,
    pub template_dir: Option<PathBuf>,
    pub ablation: Ablation,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            generator: BackendConfig::default(),
            estimator: BackendConfig::default(),
            retry: RetryPolicy::default(),
            budgets: Budgets::default(),
            confidence: Thresholds::default(),
            inline_mode: InlineMode::Naive,
            max_concurrency: 4,
            task_format: TaskFormat::Native,
            repos_root: PathBuf::from("."),
            include: Vec::new(),
            template_dir: None,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
}

impl Config {
    /// Reads a TOML (or `.json`) config. Relative paths inside it are taken
    /// relative to the config file's directory.
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: shown.clone(), source })?;
        let mut cfg: Config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse { path: shown.clone(), message: e.to_string() })?
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: shown.clone(), message: e.to_string() })?
        };
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.repos_root);
        if let Some(t) = &mut self.template_dir {
            fix(t);
        }
        for b in [&mut self.generator, &mut self.estimator] {
            if let BackendConfig::Mock { fixture: Some(f) } = b {
                fix(f);
            }
        }
    }

    /// Stable hash of every effective setting.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

fn build_generator(cfg: &BackendConfig, retry: RetryPolicy) -> Result<Box<dyn Generator>, BackendError> {
    Ok(match cfg {
        BackendConfig::Mock { fixture } => Box::new(match fixture {
            Some(f) => MockBackend::from_file(f)?,
            None => MockBackend::default(),
        }),
        BackendConfig::Openai { base_url, model, style, system_preamble } => {
            let mut c = OpenAiClient::new(base_url, model, ApiKey::from_env(), retry);
            c.style = *style;
            c.system_preamble = system_preamble.clone();
            Box::new(c)
        }
        other => {
            return Err(BackendError::InvalidResponse(format!("{other:?} cannot be used as a generator")));
        }
    })
}

fn build_scorer(cfg: &BackendConfig, retry: RetryPolicy) -> Result<Box<dyn Scorer>, BackendError> {
    Ok(match cfg {
        BackendConfig::Mock { fixture } => Box::new(match fixture {
            Some(f) => MockBackend::from_file(f)?,
            None => MockBackend::default(),
        }),
        BackendConfig::OpenaiEcho { base_url, model } => {
            Box::new(OpenAiEchoScorer { client: OpenAiClient::new(base_url, model, ApiKey::from_env(), retry) })
        }
        BackendConfig::Sidecar { base_url } => Box::new(SidecarScorer::new(base_url, retry)),
        other => return Err(BackendError::InvalidResponse(format!("{other:?} cannot be used as an estimator"))),
    })
}

/// An indexed repository and its call graph.
#[derive(Debug)]
pub struct IndexedRepo {
    pub repo: Repository,
    pub graph: CallGraph,
}

impl IndexedRepo {
    pub fn new(repo: Repository) -> Self {
        let graph = build_call_graph(&repo);
        IndexedRepo { repo, graph }
    }
}

type RepoSlot = Arc<OnceLock<Result<Arc<IndexedRepo>, String>>>;

/// Everything shared by the tasks of one run.
pub struct RunContext {
    pub cfg: Config,
    pub generator: Box<dyn Generator>,
    pub scorer: Box<dyn Scorer>,
    pub templates: Templates,
    pub fingerprint: String,
    repos: Mutex<HashMap<PathBuf, RepoSlot>>,
}

impl RunContext {
    pub fn from_config(cfg: Config) -> Result<Self, ConfigError> {
        let generator = build_generator(&cfg.generator, cfg.retry)?;
        let scorer = build_scorer(&cfg.estimator, cfg.retry)?;
        let templates = match &cfg.template_dir {
            Some(dir) => Templates::from_dir(dir)?,
            None => Templates::builtin(),
        };
        Ok(Self::with_backends(cfg, generator, scorer, templates))
    }

    pub fn with_backends(cfg: Config, generator: Box<dyn Generator>, scorer: Box<dyn Scorer>, templates: Templates) -> Self {
        let fingerprint = cfg.fingerprint();
        RunContext { cfg, generator, scorer, templates, fingerprint, repos: Mutex::new(HashMap::new()) }
    }

    pub fn repo_path(&self, task: &TaskRecord) -> PathBuf {
        let p = Path::new(&task.repo);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.cfg.repos_root.join(p)
        }
    }

    /// Registers an already indexed repository under `path`.
    pub fn insert_repo(&self, path: PathBuf, repo: Repository) {
        let slot: RepoSlot = Arc::new(OnceLock::new());
        let _ = slot.set(Ok(Arc::new(IndexedRepo::new(repo))));
        self.repos.lock().expect("repo cache lock").insert(path, slot);
    }

    /// Indexes each repository once, even when several tasks ask concurrently.
    pub fn repo(&self, path: &Path) -> Result<Arc<IndexedRepo>, String> {
        let slot = {
            let mut map = self.repos.lock().expect("repo cache lock");
            map.entry(path.to_path_buf()).or_default().clone()
        };
        slot.get_or_init(|| {
            index_repository(path, &self.cfg.include)
                .map(|repo| Arc::new(IndexedRepo::new(repo)))
                .map_err(|e| e.to_string())
        })
        .clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Index,
    BasePrompt,
    Draft,
    Score,
    Inline,
    Retrieve,
    FinalPrompt,
    Generate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Index => "index",
            Stage::BasePrompt => "base_prompt",
            Stage::Draft => "draft",
            Stage::Score => "score",
            Stage::Inline => "inline",
            Stage::Retrieve => "retrieve",
            Stage::FinalPrompt => "final_prompt",
            Stage::Generate => "generate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{stage:?}: {message}")]
pub struct TaskError {
    pub stage: Stage,
    pub message: String,
}

/// A degradation the task went through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackNote {
    pub stage: Stage,
    pub reason: String,
}

/// Wall-clock time per stage. Kept out of the result records so that those
/// stay byte-identical across runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub task_id: String,
    pub millis: BTreeMap<String, f64>,
}

impl Timings {
    fn record<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        let ms = start.elapsed().as_secs_f64() * 1e3;
        *self.millis.entry(stage.as_str().to_string()).or_insert(0.0) += ms;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task_id: String,
    pub target: String,
    pub draft: Option<DraftArtifact>,
    /// Confidence level the guidance was chosen from.
    pub confidence: Option<ConfidenceLevel>,
    pub inlined_count: usize,
    pub inline_fallbacks: usize,
    pub upstream_blocks: usize,
    pub queries: QuerySet,
    pub retrieved: Vec<String>,
    pub retrieved_count: usize,
    pub truncation: Truncation,
    pub final_prompt: String,
    pub final_body: String,
    pub fallbacks: Vec<FallbackNote>,
    pub ablation: Ablation,
    pub config_fingerprint: String,
    #[serde(skip)]
    pub timings: Timings,
}

/// A task after context assembly, before the final generation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub result: RunResult,
    pub bundle: PromptBundle,
    pub target_simple_name: String,
}

fn err(stage: Stage, message: impl std::fmt::Display) -> TaskError {
    TaskError { stage, message: message.to_string() }
}

/// Runs every stage up to and including the final prompt.
pub fn prepare_task(ctx: &RunContext, task: &TaskRecord) -> Result<Prepared, TaskError> {
    let cfg = &ctx.cfg;
    let abl = cfg.ablation;
    let mut timings = Timings { task_id: task.task_id.clone(), ..Default::default() };
    let mut fallbacks = Vec::new();

    let indexed = timings.record(Stage::Index, || ctx.repo(&ctx.repo_path(task))).map_err(|e| err(Stage::Index, e))?;
    let (repo, graph) = (&indexed.repo, &indexed.graph);
    let unit = resolve_target(repo, &task.target);
    let base = timings.record(Stage::BasePrompt, || build_base_prompt(Some(repo), task)).map_err(|e| err(Stage::BasePrompt, e))?;
    let spec = match unit {
        Some(u) => TargetSpec::from_unit(u),
        None => TargetSpec::from_signature(&task.target, &base.target_signature)
            .ok_or_else(|| err(Stage::BasePrompt, format!("cannot parse signature of `{}`", task.target)))?,
    };
    let target_q = spec.qualified_name.clone();

    let draft = timings.record(Stage::Draft, || -> Result<DraftArtifact, String> {
        let prompt = build_draft_prompt(&ctx.templates, &base).map_err(|e| e.to_string())?;
        let mut req = GenerationRequest::new(prompt, "");
        req.max_output_tokens = cfg.budgets.max_output_tokens;
        let raw = ctx.generator.generate(&req).map_err(|e| e.to_string())?;
        let d = parse_draft_for(&raw, &spec.simple_name).map_err(|e| e.to_string())?;
        if d.body.trim().is_empty() {
            return Err("draft code block is empty".into());
        }
        Ok(d)
    });
    let mut draft = match draft {
        Ok(d) => {
            for w in &d.warnings {
                log::warn!("{}: {w}", task.task_id);
            }
            Some(d)
        }
        Err(reason) => {
            log::warn!("{}: draft unavailable ({reason}); continuing without a draft", task.task_id);
            fallbacks.push(FallbackNote { stage: Stage::Draft, reason });
            None
        }
    };

    let mut confidence = None;
    if let Some(d) = draft.as_mut().filter(|_| !abl.no_confidence) {
        let indent = body_indent(&base.target_signature);
        let continuation = format!("{}\n", pyast::indent(&d.body, &indent, false));
        let scored = timings.record(Stage::Score, || ctx.scorer.score_tokens(&base.rendered, &continuation));
        let verdict = scored
            .map_err(|e| e.to_string())
            .and_then(|t| {
                let ppl = perplexity(&t).map_err(|e| e.to_string())?;
                let v = bucket_with(ppl, cfg.confidence).map_err(|e| e.to_string())?;
                d.token_logprobs = Some(t);
                Ok(v)
            });
        match verdict {
            Ok(v) => {
                confidence = Some(v.level);
                d.verdict = Some(v);
            }
            Err(reason) => {
                log::warn!("{}: scoring failed ({reason}); treating the draft as low confidence", task.task_id);
                fallbacks.push(FallbackNote { stage: Stage::Score, reason });
                confidence = Some(ConfidenceLevel::Low);
            }
        }
    }

    let mut inlined_count = 0;
    let mut inline_fallbacks = 0;
    let upstream: Vec<String> = if abl.no_upstream {
        Vec::new()
    } else {
        timings.record(Stage::Inline, || match (&draft, abl.no_inline) {
            (Some(d), false) => {
                let opts = InlineOptions { budget: cfg.budgets.inline_callers, mode: cfg.inline_mode };
                let contexts = inline_draft_into_callers(repo, graph, &spec, &d.body, opts);
                let mut blocks = Vec::new();
                for c in contexts {
                    if c.is_inlined() {
                        inlined_count += 1;
                    } else {
                        inline_fallbacks += 1;
                    }
                    if !blocks.contains(&c.text) {
                        blocks.push(c.text);
                    }
                }
                blocks
            }
            _ => select_callers(repo, graph, &spec, cfg.budgets.inline_callers)
                .into_iter()
                .map(|(caller, _)| repo.source_of(caller))
                .collect(),
        })
    };
    if inline_fallbacks > 0 {
        fallbacks.push(FallbackNote {
            stage: Stage::Inline,
            reason: format!("{inline_fallbacks} call site(s) kept as the raw caller"),
        });
    }

    let (queries, retrieved_set) = match &draft {
        Some(d) => timings.record(Stage::Retrieve, || {
            let q = merge_queries(extract_ast_queries(&d.body), d.predicted_callees.iter().cloned().collect());
            let r = (!abl.no_downstream).then(|| retrieve_callees(repo, &q, &target_q, cfg.budgets.retrieved_functions));
            (q, r)
        }),
        None => (QuerySet::default(), None),
    };
    let downstream = retrieved_set.as_ref().map(|r| downstream_entries(repo, r)).unwrap_or_default();
    let retrieved: Vec<String> = downstream.iter().map(|d| d.qualified_name.clone()).collect();

    let parts = FinalParts {
        upstream: upstream.clone(),
        downstream,
        guidance: confidence.map(|c| c.guidance().to_string()),
        draft: draft.as_ref().filter(|_| !abl.no_draft).map(|d| d.body.clone()),
    };
    let bundle = timings
        .record(Stage::FinalPrompt, || build_final_prompt(&ctx.templates, &base, &parts, cfg.budgets.prompt_tokens))
        .map_err(|e| err(Stage::FinalPrompt, e))?;

    let result = RunResult {
        task_id: task.task_id.clone(),
        target: target_q,
        draft,
        confidence,
        inlined_count,
        inline_fallbacks,
        upstream_blocks: upstream.len(),
        queries,
        retrieved_count: retrieved.len(),
        retrieved,
        truncation: bundle.truncation.clone(),
        final_prompt: bundle.rendered.clone(),
        final_body: String::new(),
        fallbacks,
        ablation: abl,
        config_fingerprint: ctx.fingerprint.clone(),
        timings,
    };
    Ok(Prepared { result, bundle, target_simple_name: spec.simple_name })
}

/// Runs all three stages for one task.
pub fn run_task(ctx: &RunContext, task: &TaskRecord) -> Result<RunResult, TaskError> {
    let Prepared { mut result, bundle, target_simple_name } = prepare_task(ctx, task)?;
    let mut req = GenerationRequest::new(bundle.rendered, "");
    req.max_output_tokens = ctx.cfg.budgets.max_output_tokens;
    let generated = result.timings.record(Stage::Generate, || ctx.generator.generate(&req));
    match generated {
        Ok(raw) => match parse_draft_for(&raw, &target_simple_name) {
            Ok(d) => result.final_body = d.body,
            Err(e) => {
                result.fallbacks.push(FallbackNote { stage: Stage::Generate, reason: format!("{e}; using the raw response") });
                result.final_body = pyast::function_body_of(raw.trim_matches('\n'), &target_simple_name);
            }
        },
        Err(e) => match &result.draft {
            Some(d) => {
                result.fallbacks.push(FallbackNote { stage: Stage::Generate, reason: format!("{e}; using the draft") });
                result.final_body = d.body.clone();
            }
            None => return Err(err(Stage::Generate, format!("no draft and final generation failed: {e}"))),
        },
    }
    Ok(result)
}

/// One line of a result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ResultRecord {
    Ok(RunResult),
    Error(TaskFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: String,
    pub stage: Stage,
    pub message: String,
    pub config_fingerprint: String,
}

impl ResultRecord {
    pub fn task_id(&self) -> &str {
        match self {
            ResultRecord::Ok(r) => &r.task_id,
            ResultRecord::Error(f) => &f.task_id,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n: usize,
    pub completed: usize,
    pub failed: usize,
    pub skipped: usize,
    /// Fallbacks taken, by stage.
    pub fallbacks: BTreeMap<String, usize>,
    /// Task failures, by stage.
    pub failures: BTreeMap<String, usize>,
}

impl std::fmt::Display for BatchSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n={} completed={} failed={} skipped={}", self.n, self.completed, self.failed, self.skipped)?;
        for (k, v) in &self.fallbacks {
            write!(f, " fallback.{k}={v}")?;
        }
        for (k, v) in &self.failures {
            write!(f, " failure.{k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    /// Skip tasks already recorded in the output file.
    pub resume: bool,
    /// Where per-stage timings go (one JSON line per task).
    pub timings: Option<PathBuf>,
}

/// Task ids already in a result file. A torn final line is cut off.
fn completed_ids(out: &Path) -> std::io::Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    let Ok(file) = File::open(out) else { return Ok(ids) };
    let mut good_len = 0u64;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        let Some(id) = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("task_id").and_then(|t| t.as_str()).map(str::to_string))
        else {
            break;
        };
        ids.insert(id);
        good_len += n as u64;
    }
    let f = OpenOptions::new().write(true).open(out)?;
    if f.metadata()?.len() != good_len {
        log::warn!("{}: dropping an incomplete trailing record", out.display());
        f.set_len(good_len)?;
    }
    Ok(ids)
}

/// Runs `tasks` with at most `max_concurrency` in flight, appending one JSON
/// line per task to `out` in input order as results become available.
pub fn run_batch(ctx: &RunContext, tasks: &[TaskRecord], out: &Path, opts: &BatchOptions) -> std::io::Result<BatchSummary> {
    let done = if opts.resume { completed_ids(out)? } else { BTreeSet::new() };
    let mut writer = if opts.resume {
        OpenOptions::new().create(true).append(true).open(out)?
    } else {
        File::create(out)?
    };
    let mut timing_writer = match &opts.timings {
        Some(p) if opts.resume => Some(OpenOptions::new().create(true).append(true).open(p)?),
        Some(p) => Some(File::create(p)?),
        None => None,
    };
    let mut summary = BatchSummary { n: tasks.len(), ..Default::default() };
    let pending: Vec<&TaskRecord> = tasks.iter().filter(|t| !done.contains(&t.task_id)).collect();
    summary.skipped = tasks.len() - pending.len();
    if pending.is_empty() {
        return Ok(summary);
    }

    let workers = ctx.cfg.max_concurrency.clamp(1, pending.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, ResultRecord, Timings)>();
    std::thread::scope(|scope| -> std::io::Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = pending.get(i) else { break };
                let (record, timings) = match run_task(ctx, task) {
                    Ok(mut r) => {
                        let t = std::mem::take(&mut r.timings);
                        (ResultRecord::Ok(r), t)
                    }
                    Err(e) => (
                        ResultRecord::Error(TaskFailure {
                            task_id: task.task_id.clone(),
                            stage: e.stage,
                            message: e.message,
                            config_fingerprint: ctx.fingerprint.clone(),
                        }),
                        Timings { task_id: task.task_id.clone(), ..Default::default() },
                    ),
                };
                if tx.send((i, record, timings)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut buffered: BTreeMap<usize, (ResultRecord, Timings)> = BTreeMap::new();
        let mut expected = 0;
        for (i, record, timings) in rx {
            buffered.insert(i, (record, timings));
            while let Some((record, timings)) = buffered.remove(&expected) {
                match &record {
                    ResultRecord::Ok(r) => {
                        summary.completed += 1;
                        for f in &r.fallbacks {
                            *summary.fallbacks.entry(f.stage.as_str().to_string()).or_insert(0) += 1;
                        }
                    }
                    ResultRecord::Error(f) => {
                        summary.failed += 1;
                        *summary.failures.entry(f.stage.as_str().to_string()).or_insert(0) += 1;
                    }
                }
                let line = serde_json::to_string(&record).expect("result record serializes");
                writeln!(writer, "{line}")?;
                writer.flush()?;
                if let Some(tw) = timing_writer.as_mut() {
                    writeln!(tw, "{}", serde_json::to_string(&timings).expect("timings serialize"))?;
                }
                expected += 1;
            }
        }
        Ok(())
    })?;
    Ok(summary)
}

/// Reads a result file back.
pub fn read_results(path: &Path) -> std::io::Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}
