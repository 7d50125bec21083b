#![allow(dead_code)]

use std::path::{Path, PathBuf};

use inline_context::pipeline::{Config, RunContext};
use inline_context::task::{load_tasks, TaskFormat, TaskRecord};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn config() -> Config {
    Config::load(&fixtures().join("pipeline.toml")).expect("fixture config loads")
}

pub fn context(edit: impl FnOnce(&mut Config)) -> RunContext {
    let mut cfg = config();
    edit(&mut cfg);
    RunContext::from_config(cfg).expect("mock backends build")
}

pub fn tasks() -> Vec<TaskRecord> {
    load_tasks(&fixtures().join("tasks.jsonl"), TaskFormat::Native).expect("fixture tasks load")
}
