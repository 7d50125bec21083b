use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use inline_context::callgraph::{build_call_graph, find_callers};
use inline_context::confidence::{bucket_with, calibration, perplexity, Thresholds, TokenLogProbs};
use inline_context::inline::{inline_draft_into_callers, InlineMode, InlineOptions, TargetSpec};
use inline_context::metrics::{evaluate, CallMatchMode, EvalOptions, EvalPair, EvalReport, ScoreReport};
use inline_context::pipeline::{
    prepare_task, run_batch, Ablation, BatchOptions, Config, ResultRecord, RunContext,
};
use inline_context::retrieval::{extract_ast_queries, merge_queries, retrieve_callees};
use inline_context::source::{index_repository, Repository};
use inline_context::task::{load_tasks, resolve_target};

#[derive(Parser)]
#[command(name = "inline-context", version, about = "Repository-level code completion context engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a repository and write it as JSON.
    Index {
        #[arg(long, default_value = ".")]
        root: PathBuf,
        /// Glob of files to include (repeatable, default `**/*.py`).
        #[arg(long)]
        include: Vec<String>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print a short listing instead of the full index.
        #[arg(long)]
        summary: bool,
    },
    /// Print call edges as JSON lines.
    Graph {
        #[arg(long, default_value = ".")]
        root: PathBuf,
        #[arg(long)]
        include: Vec<String>,
        /// Only edges that reach this function.
        #[arg(long)]
        callee: Option<String>,
    },
    /// Inline a draft body into the callers of a function.
    Inline {
        #[arg(long, default_value = ".")]
        root: PathBuf,
        #[arg(long)]
        target: String,
        /// File holding the draft body.
        #[arg(long)]
        draft: PathBuf,
        #[arg(long, default_value = "naive")]
        mode: InlineMode,
        #[arg(long, default_value_t = 5)]
        budget: usize,
        /// Print the transformed callers as source instead of JSON.
        #[arg(long)]
        text: bool,
    },
    /// Retrieve candidate callees for a target from a draft and predicted names.
    Retrieve {
        #[arg(long, default_value = ".")]
        root: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        draft: Option<PathBuf>,
        /// JSON list of predicted callee names, e.g. `["load", "cfg.parse"]`.
        #[arg(long)]
        predicted_callees: Option<String>,
        #[arg(long, default_value_t = 20)]
        cap: usize,
    },
    /// Perplexity and confidence bucket of a draft.
    ///
    /// Either score `--draft` after `--prompt` with the estimator from
    /// `--config`, or read already scored tokens from `--logprobs`.
    Ppl {
        /// JSON file: a list of log-probabilities or `{tokens, logprobs}`.
        #[arg(long, conflicts_with_all = ["prompt", "draft", "config"])]
        logprobs: Option<PathBuf>,
        #[arg(long, requires_all = ["draft", "config"])]
        prompt: Option<PathBuf>,
        #[arg(long, requires_all = ["prompt", "config"])]
        draft: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Share of each confidence level over a set of perplexities.
    Calibrate {
        /// One perplexity per line, or a result file from `run`.
        input: PathBuf,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Render the final prompt of one task.
    Prompt {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task_id: String,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Score generations against references.
    Eval {
        /// JSONL with `task_id` and `reference_body` (a task file works).
        #[arg(long)]
        refs: PathBuf,
        /// JSONL with `task_id` and `body`, or a result file from `run`.
        #[arg(long)]
        gens: PathBuf,
        /// Metadata key to report per group.
        #[arg(long)]
        group_by: Option<String>,
        #[arg(long)]
        strict_em: bool,
        #[arg(long, default_value = "set")]
        call_mode: CallMatchMode,
        /// Restrict DIR to functions defined in this repository.
        #[arg(long)]
        repo: Option<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the pipeline over a task file.
    Run {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip tasks already present in the output file.
        #[arg(long)]
        resume: bool,
        /// Write per-stage timings here.
        #[arg(long)]
        timings: Option<PathBuf>,
        #[command(flatten)]
        ablation: AblationArgs,
    },
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long, default_value_t = 1.3)]
    high_below: f64,
    #[arg(long, default_value_t = 2.0)]
    low_above: f64,
}

impl ThresholdArgs {
    fn get(&self) -> Thresholds {
        Thresholds { high_below: self.high_below, low_above: self.low_above }
    }
}

#[derive(Args, Clone, Copy)]
struct AblationArgs {
    /// Leave out the inlined callers.
    #[arg(long)]
    no_upstream: bool,
    /// Show callers as they are instead of inlining the draft.
    #[arg(long)]
    no_inline: bool,
    /// Leave out retrieved callees.
    #[arg(long)]
    no_downstream: bool,
    /// Leave out the confidence guidance.
    #[arg(long)]
    no_confidence: bool,
    /// Leave out the draft.
    #[arg(long)]
    no_draft: bool,
}

impl AblationArgs {
    fn apply(self, a: &mut Ablation) {
        a.no_upstream |= self.no_upstream;
        a.no_inline |= self.no_inline;
        a.no_downstream |= self.no_downstream;
        a.no_confidence |= self.no_confidence;
        a.no_draft |= self.no_draft;
    }
}

fn index(repo: &Path, include: &[String]) -> Result<Repository> {
    index_repository(repo, include).with_context(|| format!("indexing {}", repo.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct IndexSummary<'a> {
    root: String,
    files: Vec<FileSummary<'a>>,
    functions: Vec<FunctionSummary<'a>>,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct FileSummary<'a> {
    path: &'a str,
    parse_ok: bool,
    imports: usize,
}

#[derive(Serialize)]
struct FunctionSummary<'a> {
    qualified_name: &'a str,
    file: &'a str,
    lines: (usize, usize),
    params: Vec<&'a str>,
}

fn cmd_index(repo: &Path, include: &[String], out: Option<&Path>, summary: bool) -> Result<()> {
    let r = index(repo, include)?;
    if !summary {
        let json = r.to_json() + "\n";
        return match out {
            Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display())),
            None => Ok(std::io::stdout().lock().write_all(json.as_bytes())?),
        };
    }
    print_json(&IndexSummary {
        root: r.root_path.display().to_string(),
        files: r.files.iter().map(|f| FileSummary { path: &f.path, parse_ok: f.parse_ok, imports: f.imports.len() }).collect(),
        functions: r
            .functions_in_source_order()
            .into_iter()
            .map(|f| FunctionSummary {
                qualified_name: &f.qualified_name,
                file: &f.file,
                lines: (f.def_span.start, f.def_span.end),
                params: f.params.iter().map(|p| p.name.as_str()).collect(),
            })
            .collect(),
        warnings: &r.warnings,
    })
}

fn cmd_graph(repo: &Path, include: &[String], callee: Option<&str>) -> Result<()> {
    let r = index(repo, include)?;
    let g = build_call_graph(&r);
    let mut out = std::io::stdout().lock();
    match callee {
        Some(target) => {
            let Some(unit) = resolve_target(&r, target) else { bail!("unknown function `{target}`") };
            for c in find_callers(&r, &g, &unit.qualified_name) {
                writeln!(out, "{}", serde_json::to_string(&c.site)?)?;
            }
        }
        None => {
            for e in g.edge_records() {
                writeln!(out, "{}", serde_json::to_string(&e)?)?;
            }
        }
    }
    eprintln!(
        "{} edges, {} dynamic calls skipped, {} unresolved",
        g.edges.len(),
        g.diagnostics.dynamic_calls_skipped,
        g.diagnostics.unresolved_calls
    );
    Ok(())
}

fn cmd_inline(repo: &Path, target: &str, draft: &Path, mode: InlineMode, budget: usize, text: bool) -> Result<()> {
    let r = index(repo, &[])?;
    let g = build_call_graph(&r);
    let Some(unit) = resolve_target(&r, target) else { bail!("unknown function `{target}`") };
    let body = std::fs::read_to_string(draft).with_context(|| format!("reading {}", draft.display()))?;
    let contexts = inline_draft_into_callers(&r, &g, &TargetSpec::from_unit(unit), &body, InlineOptions { budget, mode });
    if !text {
        return print_json(&contexts);
    }
    for c in &contexts {
        let status = if c.is_inlined() { "inlined".to_string() } else { format!("{:?}", c.outcome) };
        println!("# {} (line {}): {status}", c.caller, c.call_site.location.line);
        println!("{}\n", c.text.trim_end());
    }
    if contexts.is_empty() {
        eprintln!("no callers of {}", unit.qualified_name);
    }
    Ok(())
}

fn cmd_retrieve(repo: &Path, target: &str, draft: Option<&Path>, predicted: Option<&str>, cap: usize) -> Result<()> {
    let r = index(repo, &[])?;
    let ast = match draft {
        Some(p) => extract_ast_queries(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => BTreeSet::new(),
    };
    let llm: Vec<String> = match predicted {
        Some(list) => serde_json::from_str(list).context("--predicted-callees must be a JSON list of strings")?,
        None => Vec::new(),
    };
    let llm = llm.iter().map(|n| n.rsplit('.').next().unwrap_or(n).to_string()).collect();
    let q = merge_queries(ast, llm);
    log::info!("queries: {:?}", q.merged);
    let target_q = resolve_target(&r, target).map_or(target, |u| u.qualified_name.as_str());
    print_json(&retrieve_callees(&r, &q, target_q, cap))
}

fn cmd_ppl_scored(prompt: &Path, draft: &Path, config: &Path, t: Thresholds) -> Result<()> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let ctx = RunContext::from_config(Config::load(config)?)?;
    let tlp = ctx.scorer.score_tokens(&read(prompt)?, &read(draft)?)?;
    let verdict = bucket_with(perplexity(&tlp)?, t)?;
    print_json(&serde_json::json!({
        "ppl": verdict.ppl,
        "level": verdict.level,
        "guidance": verdict.guidance,
        "tokens": tlp.tokens.len(),
        "estimator": tlp.estimator_id,
    }))
}

fn cmd_ppl(path: &Path, t: Thresholds) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).context("logprob file is not JSON")?;
    let tlp = match value {
        serde_json::Value::Array(_) => {
            let lps: Vec<f64> = serde_json::from_value(value)?;
            TokenLogProbs::new(vec![String::new(); lps.len()], lps, "file")?
        }
        _ => {
            #[derive(serde::Deserialize)]
            struct Scored {
                tokens: Vec<String>,
                logprobs: Vec<f64>,
            }
            let s: Scored = serde_json::from_value(value)?;
            TokenLogProbs::new(s.tokens, s.logprobs, "file")?
        }
    };
    let verdict = bucket_with(perplexity(&tlp)?, t)?;
    print_json(&verdict)
}

fn cmd_calibrate(path: &Path, t: Thresholds) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut ppls = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Ok(v) = line.parse::<f64>() {
            ppls.push(v);
            continue;
        }
        let rec: ResultRecord =
            serde_json::from_str(line).with_context(|| format!("{}:{}: neither a number nor a result", path.display(), i + 1))?;
        if let ResultRecord::Ok(r) = rec {
            if let Some(v) = r.draft.and_then(|d| d.verdict) {
                ppls.push(v.ppl);
            }
        }
    }
    print_json(&calibration(&ppls, t))
}

fn load_context(config: &Path, ablation: AblationArgs) -> Result<RunContext> {
    let mut cfg = Config::load(config)?;
    ablation.apply(&mut cfg.ablation);
    Ok(RunContext::from_config(cfg)?)
}

fn cmd_prompt(tasks: &Path, config: &Path, task_id: &str, ablation: AblationArgs) -> Result<()> {
    let ctx = load_context(config, ablation)?;
    let tasks = load_tasks(tasks, ctx.cfg.task_format)?;
    let Some(task) = tasks.iter().find(|t| t.task_id == task_id) else { bail!("no task `{task_id}`") };
    let prepared = prepare_task(&ctx, task)?;
    print!("{}", prepared.bundle.rendered);
    eprintln!("~{} tokens", prepared.bundle.token_estimate);
    Ok(())
}

fn cmd_run(tasks: &Path, config: &Path, out: &Path, resume: bool, timings: Option<PathBuf>, ablation: AblationArgs) -> Result<bool> {
    let ctx = load_context(config, ablation)?;
    let tasks = load_tasks(tasks, ctx.cfg.task_format)?;
    log::info!("{} tasks, config {}", tasks.len(), &ctx.fingerprint[..12]);
    let summary = run_batch(&ctx, &tasks, out, &BatchOptions { resume, timings })
        .with_context(|| format!("writing {}", out.display()))?;
    println!("{summary}");
    Ok(summary.failed == 0)
}

fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn str_of<'a>(v: &'a serde_json::Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| v.get(*k).and_then(|x| x.as_str()))
}

fn print_report(report: &EvalReport, group_by: Option<&str>) {
    let row = |name: &str, r: &ScoreReport| {
        println!("{name:<24} {:>5} {:>7.2} {:>7.2} {:>7.2} {:>7.2}", r.n, r.em, r.es, r.bleu, r.id_f1);
    };
    println!("{:<24} {:>5} {:>7} {:>7} {:>7} {:>7}", group_by.unwrap_or("group"), "n", "EM", "ES", "BLEU", "ID.F1");
    for (g, r) in &report.groups {
        row(g, r);
    }
    row("overall", &report.overall);
    let t = &report.targeted;
    println!(
        "last line: EM {:.2} BLEU {:.2} ES {:.2}",
        t.last_line_em, t.last_line_bleu, t.last_line_es
    );
    println!(
        "calls: EM {:.2} Jaccard {:.2} F1 {:.2} Coverage {:.2} DIR {:.2}",
        t.call_em, t.call_jaccard, t.call_f1, t.call_coverage, t.call_dir
    );
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    refs: &Path,
    gens: &Path,
    group_by: Option<&str>,
    strict_em: bool,
    call_mode: CallMatchMode,
    repo: Option<&Path>,
    json: Option<&Path>,
) -> Result<()> {
    let mut references = std::collections::BTreeMap::new();
    for v in read_jsonl(refs)? {
        let Some(id) = str_of(&v, &["task_id"]) else { bail!("reference without task_id in {}", refs.display()) };
        let Some(body) = str_of(&v, &["reference_body", "reference", "body"]) else { continue };
        let group = group_by.and_then(|k| v.get("metadata").and_then(|m| m.get(k)).or_else(|| v.get(k)));
        let group = group.map(|g| g.as_str().map_or_else(|| g.to_string(), str::to_string));
        references.insert(id.to_string(), (body.to_string(), group));
    }
    let mut pairs = Vec::new();
    let mut missing = 0;
    for v in read_jsonl(gens)? {
        let Some(id) = str_of(&v, &["task_id"]) else { continue };
        let Some((reference, group)) = references.get(id) else {
            missing += 1;
            continue;
        };
        let candidate = str_of(&v, &["final_body", "body", "completion"]).unwrap_or("");
        pairs.push(EvalPair { task_id: id.to_string(), reference: reference.clone(), candidate: candidate.to_string(), group: group.clone() });
    }
    if missing > 0 {
        log::warn!("{missing} generation(s) have no reference");
    }
    let repo_functions = match repo {
        Some(p) => Some(index(p, &[])?.simple_names().into_iter().map(str::to_string).collect::<BTreeSet<_>>()),
        None => None,
    };
    let report = evaluate(&pairs, EvalOptions { strict_em, call_mode }, repo_functions.as_ref());
    print_report(&report, group_by);
    if let Some(p) = json {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index { root, include, out, summary } => cmd_index(&root, &include, out.as_deref(), summary).map(|_| true),
        Command::Graph { root, include, callee } => cmd_graph(&root, &include, callee.as_deref()).map(|_| true),
        Command::Inline { root, target, draft, mode, budget, text } => {
            cmd_inline(&root, &target, &draft, mode, budget, text).map(|_| true)
        }
        Command::Retrieve { root, target, draft, predicted_callees, cap } => {
            cmd_retrieve(&root, &target, draft.as_deref(), predicted_callees.as_deref(), cap).map(|_| true)
        }
        Command::Ppl { logprobs: Some(f), thresholds, .. } => cmd_ppl(&f, thresholds.get()).map(|_| true),
        Command::Ppl { prompt: Some(p), draft: Some(d), config: Some(c), thresholds, .. } => {
            cmd_ppl_scored(&p, &d, &c, thresholds.get()).map(|_| true)
        }
        Command::Ppl { .. } => Err(anyhow::anyhow!("ppl needs --logprobs, or --prompt, --draft and --config")),
        Command::Calibrate { input, thresholds } => cmd_calibrate(&input, thresholds.get()).map(|_| true),
        Command::Prompt { tasks, config, task_id, ablation } => cmd_prompt(&tasks, &config, &task_id, ablation).map(|_| true),
        Command::Eval { refs, gens, group_by, strict_em, call_mode, repo, json } => {
            cmd_eval(&refs, &gens, group_by.as_deref(), strict_em, call_mode, repo.as_deref(), json.as_deref()).map(|_| true)
        }
        Command::Run { tasks, config, out, resume, timings, ablation } => {
            cmd_run(&tasks, &config, &out, resume, timings, ablation)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
