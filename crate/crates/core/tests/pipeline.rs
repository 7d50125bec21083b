mod common;

use std::collections::BTreeMap;
use std::fs;

use inline_context::backend::{BackendError, GenerationRequest, Generator, MockBackend, MockFixture, Scorer};
use inline_context::confidence::ConfidenceLevel;
use inline_context::pipeline::{
    prepare_task, read_results, run_batch, run_task, BatchOptions, Config, ResultRecord, RunContext, Stage,
};
use inline_context::prompt::{
    section_text, sections_in_order, sections_present, Templates, SECTION_CONTEXT, SECTION_DOWNSTREAM, SECTION_DRAFT,
    SECTION_GUIDANCE, SECTION_TARGET, SECTION_UPSTREAM,
};
use inline_context::task::TaskRecord;

fn ok_results(path: &std::path::Path) -> BTreeMap<String, inline_context::pipeline::RunResult> {
    read_results(path)
        .unwrap()
        .into_iter()
        .filter_map(|r| match r {
            ResultRecord::Ok(r) => Some((r.task_id.clone(), r)),
            ResultRecord::Error(_) => None,
        })
        .collect()
}

/// Result lines with the machine-dependent config fingerprint blanked.
fn portable(text: &str) -> String {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["config_fingerprint"] = "-".into();
            v.to_string() + "\n"
        })
        .collect()
}

#[test]
fn batch_matches_golden_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.jsonl");
    let summary = run_batch(&common::context(|_| {}), &common::tasks(), &out, &BatchOptions::default()).unwrap();
    assert_eq!((summary.n, summary.completed, summary.failed), (10, 10, 0));
    let got = portable(&fs::read_to_string(&out).unwrap());
    let golden = common::fixtures().join("golden_results.jsonl");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&golden, &got).unwrap();
    }
    let want = fs::read_to_string(&golden).expect("golden file present (set UPDATE_GOLDEN=1 to create)");
    assert!(got == want, "results differ from {}", golden.display());
}

#[test]
fn two_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let tasks = common::tasks();
    run_batch(&common::context(|_| {}), &tasks, &a, &BatchOptions::default()).unwrap();
    run_batch(&common::context(|c| c.max_concurrency = 1), &tasks, &b, &BatchOptions::default()).unwrap();
    let (a, b) = (fs::read(a).unwrap(), fs::read(b).unwrap());
    // Concurrency is not part of the output, but it is part of the fingerprint.
    let strip = |bytes: &[u8]| portable(std::str::from_utf8(bytes).unwrap());
    assert_eq!(strip(&a), strip(&b));
    let again = dir.path().join("c.jsonl");
    run_batch(&common::context(|_| {}), &tasks, &again, &BatchOptions::default()).unwrap();
    assert_eq!(a, fs::read(again).unwrap());
}

#[test]
fn every_final_prompt_keeps_section_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    run_batch(&common::context(|_| {}), &common::tasks(), &out, &BatchOptions::default()).unwrap();
    for (id, r) in ok_results(&out) {
        assert!(sections_in_order(&r.final_prompt), "{id}");
        let target = r.target.rsplit('.').next().unwrap();
        assert!(r.final_prompt.contains(&format!("def {target}(")), "{id}");
    }
}

#[test]
fn injected_failures_take_their_fallbacks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    let summary = run_batch(&common::context(|_| {}), &common::tasks(), &out, &BatchOptions::default()).unwrap();
    assert_eq!(summary.fallbacks.get("draft"), Some(&1));
    assert_eq!(summary.fallbacks.get("score"), Some(&1));
    let results = ok_results(&out);
    assert_eq!(results.len(), 10);

    let t06 = &results["t06"];
    assert!(t06.draft.is_none() && t06.confidence.is_none());
    assert_eq!(t06.fallbacks[0].stage, Stage::Draft);
    let present = sections_present(&t06.final_prompt);
    for gone in [SECTION_DRAFT, SECTION_GUIDANCE, SECTION_DOWNSTREAM] {
        assert!(!present.contains(&gone), "{gone}");
    }
    assert!(present.contains(&SECTION_UPSTREAM), "raw callers still shown");
    assert!(section_text(&t06.final_prompt, SECTION_UPSTREAM).unwrap().contains("def summary("));
    assert_eq!(t06.final_body, "return len(tokenize_words(text))");

    let t10 = &results["t10"];
    assert_eq!(t10.confidence, Some(ConfidenceLevel::Low));
    assert!(t10.fallbacks.iter().any(|f| f.stage == Stage::Score));
    let guidance = section_text(&t10.final_prompt, SECTION_GUIDANCE).unwrap();
    assert_eq!(guidance, format!("# {}", ConfidenceLevel::Low.guidance()));

    // geo/broken.py does not stop geo tasks from running.
    assert!(results["t01"].fallbacks.is_empty());
}

#[test]
fn empty_task_list_writes_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    let summary = run_batch(&common::context(|_| {}), &[], &out, &BatchOptions::default()).unwrap();
    assert_eq!(summary.n, 0);
    assert_eq!(summary.to_string(), "n=0 completed=0 failed=0 skipped=0");
    assert_eq!(fs::read_to_string(out).unwrap(), "");
}

#[test]
fn bad_repo_path_is_recorded_not_fatal() {
    let mut tasks: Vec<TaskRecord> = common::tasks().into_iter().take(3).collect();
    tasks[1].repo = "no_such_repo".into();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    let summary = run_batch(&common::context(|_| {}), &tasks, &out, &BatchOptions::default()).unwrap();
    assert_eq!((summary.completed, summary.failed), (2, 1));
    assert_eq!(summary.failures.get("index"), Some(&1));
    let records = read_results(&out).unwrap();
    let ids: Vec<&str> = records.iter().map(|r| r.task_id()).collect();
    assert_eq!(ids, ["t01", "t02", "t03"]);
    match &records[1] {
        ResultRecord::Error(f) => {
            assert_eq!(f.stage, Stage::Index);
            assert!(f.message.contains("no_such_repo"), "{}", f.message);
        }
        other => panic!("expected an error record, got {other:?}"),
    }
}

#[test]
fn resume_only_runs_missing_tasks() {
    let tasks: Vec<TaskRecord> = common::tasks().into_iter().take(3).collect();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    let ctx = common::context(|_| {});
    run_batch(&ctx, &tasks[..2], &out, &BatchOptions::default()).unwrap();
    // A crash while writing task 3 leaves a torn line behind.
    let mut text = fs::read_to_string(&out).unwrap();
    text.push_str("{\"status\":\"ok\",\"task_id\":\"t0");
    fs::write(&out, &text).unwrap();

    let opts = BatchOptions { resume: true, timings: None };
    let summary = run_batch(&ctx, &tasks, &out, &opts).unwrap();
    assert_eq!((summary.skipped, summary.completed), (2, 1));
    let ids: Vec<String> = read_results(&out).unwrap().iter().map(|r| r.task_id().to_string()).collect();
    assert_eq!(ids, ["t01", "t02", "t03"]);

    let full = dir.path().join("full.jsonl");
    run_batch(&ctx, &tasks, &full, &BatchOptions::default()).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), fs::read_to_string(&full).unwrap());
}

struct CountingGenerator {
    inner: MockBackend,
    calls: std::sync::Arc<std::sync::Mutex<Vec<String>>>,
}

impl Generator for CountingGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        self.calls.lock().unwrap().push(req.prompt.clone());
        self.inner.generate(req)
    }

    fn id(&self) -> String {
        "counting".into()
    }
}

#[test]
fn resume_executes_only_the_third_task() {
    let tasks: Vec<TaskRecord> = common::tasks().into_iter().take(3).collect();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    run_batch(&common::context(|_| {}), &tasks[..2], &out, &BatchOptions::default()).unwrap();
    let calls = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let gen = CountingGenerator {
        inner: MockBackend::from_file(&common::fixtures().join("mock.json")).unwrap(),
        calls: calls.clone(),
    };
    let scorer = MockBackend::from_file(&common::fixtures().join("mock.json")).unwrap();
    let ctx = RunContext::with_backends(common::config(), Box::new(gen), Box::new(scorer), Templates::builtin());
    run_batch(&ctx, &tasks, &out, &BatchOptions { resume: true, timings: None }).unwrap();
    let calls = calls.lock().unwrap();
    assert_eq!(calls.len(), 2, "one draft and one final generation");
    assert!(calls.iter().all(|p| p.contains("def area(")));
}

#[test]
fn timings_go_to_their_own_file() {
    let dir = tempfile::tempdir().unwrap();
    let (out, timings) = (dir.path().join("r.jsonl"), dir.path().join("t.jsonl"));
    let tasks: Vec<TaskRecord> = common::tasks().into_iter().take(4).collect();
    run_batch(&common::context(|_| {}), &tasks, &out, &BatchOptions { resume: false, timings: Some(timings.clone()) }).unwrap();
    let lines: Vec<serde_json::Value> =
        fs::read_to_string(&timings).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["task_id"], "t01");
    for stage in ["index", "draft", "score", "inline", "retrieve", "final_prompt", "generate"] {
        assert!(lines[0]["millis"].get(stage).is_some(), "{stage}");
    }
    assert!(!fs::read_to_string(&out).unwrap().contains("millis"));
}

struct FixedScorer(f64);

impl Scorer for FixedScorer {
    fn score_tokens(&self, _: &str, continuation: &str) -> Result<inline_context::confidence::TokenLogProbs, BackendError> {
        let toks: Vec<String> = continuation.split_inclusive(' ').map(str::to_string).collect();
        let lps = vec![self.0; toks.len()];
        Ok(inline_context::confidence::TokenLogProbs::new(toks, lps, "fixed").unwrap())
    }

    fn id(&self) -> String {
        "fixed".into()
    }
}

fn with_generator(fixture: MockFixture, scorer: impl Scorer + 'static) -> RunContext {
    RunContext::with_backends(common::config(), Box::new(MockBackend::new(fixture)), Box::new(scorer), Templates::builtin())
}

fn task(id: &str, target: &str) -> TaskRecord {
    let mut t = common::tasks().remove(0);
    t.task_id = id.into();
    t.target = target.into();
    t.reference_body = None;
    t
}

#[test]
fn no_callers_and_no_queries_gives_base_guidance_and_draft() {
    let fixture = MockFixture { default_response: Some("```python\nreturn {}\n```\nCALLEES: []".into()), ..Default::default() };
    let ctx = with_generator(fixture, FixedScorer(-0.1));
    let p = prepare_task(&ctx, &task("x", "store.kv.index_words")).unwrap();
    assert_eq!(p.result.upstream_blocks, 0);
    assert!(p.result.queries.merged.is_empty());
    assert_eq!(p.result.retrieved_count, 0);
    assert_eq!(p.result.confidence, Some(ConfidenceLevel::High));
    let r = &p.bundle.rendered;
    assert_eq!(sections_present(r), [SECTION_CONTEXT, SECTION_GUIDANCE, SECTION_DRAFT, SECTION_TARGET]);
    assert_eq!(section_text(r, SECTION_CONTEXT), Some(p.bundle.base.context_text().trim_matches('\n')));
    assert_eq!(section_text(r, SECTION_TARGET), Some(p.bundle.base.target_text().trim_matches('\n')));
    assert_eq!(section_text(&p.bundle.rendered, SECTION_DRAFT), Some("return {}"));
}

#[test]
fn final_generation_failure_falls_back_to_draft() {
    let fixture = MockFixture {
        default_response: Some("```python\nreturn a + (b - a) * t\n```\nCALLEES: []".into()),
        rules: vec![inline_context::backend::MockRule {
            contains: SECTION_GUIDANCE.into(),
            all_of: vec![],
            response: None,
            error: Some(inline_context::backend::InjectedError::Unreachable),
        }],
        ..Default::default()
    };
    let ctx = with_generator(fixture, FixedScorer(-1.0));
    let r = run_task(&ctx, &task("x", "geo.util.lerp")).unwrap();
    assert_eq!(r.final_body, "return a + (b - a) * t");
    assert_eq!(r.confidence, Some(ConfidenceLevel::Low));
    assert!(r.fallbacks.iter().any(|f| f.stage == Stage::Generate));
}

#[test]
fn unreachable_generator_without_draft_is_a_task_error() {
    let fixture = MockFixture {
        rules: vec![inline_context::backend::MockRule {
            contains: String::new(),
            all_of: vec![],
            response: None,
            error: Some(inline_context::backend::InjectedError::Unreachable),
        }],
        ..Default::default()
    };
    let ctx = with_generator(fixture, FixedScorer(-0.1));
    let e = run_task(&ctx, &task("x", "geo.util.lerp")).unwrap_err();
    assert_eq!(e.stage, Stage::Generate);
}

#[test]
fn raw_final_response_is_reduced_to_a_body() {
    let fixture = MockFixture {
        default_response: Some("```python\nreturn 1\n```\nCALLEES: []".into()),
        rules: vec![inline_context::backend::MockRule {
            contains: SECTION_DRAFT.into(),
            all_of: vec![],
            response: Some("def lerp(a, b, t):\n    return a * (1 - t) + b * t\n".into()),
            error: None,
        }],
        ..Default::default()
    };
    let ctx = with_generator(fixture, FixedScorer(-0.1));
    let r = run_task(&ctx, &task("x", "geo.util.lerp")).unwrap();
    assert_eq!(r.final_body, "return a * (1 - t) + b * t");
}

#[test]
fn fingerprint_tracks_settings() {
    let a = common::config();
    let mut b = common::config();
    assert_eq!(a.fingerprint(), b.fingerprint());
    b.budgets.retrieved_functions += 1;
    assert_ne!(a.fingerprint(), b.fingerprint());
    let mut c = common::config();
    c.ablation.no_draft = true;
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn json_config_is_equivalent_to_toml() {
    let toml_cfg = common::config();
    let fx = common::fixtures();
    let mock = fx.join("mock.json");
    let json = serde_json::json!({
        "repos_root": fx.join("."),
        "max_concurrency": 4,
        "inline_mode": "cf-safe",
        "generator": {"kind": "mock", "fixture": mock},
        "estimator": {"kind": "mock", "fixture": mock},
        "retry": {"max_retries": 0, "initial_backoff_ms": 1},
        "budgets": {"prompt_tokens": 6000}
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, json.to_string()).unwrap();
    assert_eq!(Config::load(&path).unwrap().fingerprint(), toml_cfg.fingerprint());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "max_concurency = 3\n").unwrap();
    assert!(Config::load(&path).is_err());
}
