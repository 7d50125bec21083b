//! Benchmark task records and the loaders for supported task-file formats.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::pyast;
use crate::source::{parse_signature, FunctionUnit, Repository};

/// A code snippet the task supplies as context (e.g. a cross-file reference).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSnippet {
    pub name: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    /// Repository directory, relative paths resolved against the config's `repos_root`.
    pub repo: String,
    /// Qualified name of the function to complete (`pkg.mod.Class.method`).
    pub target: String,
    /// `def ...:` header. Empty means take it from the indexed repository.
    #[serde(default)]
    pub signature: String,
    #[serde(default)]
    pub description: String,
    /// Import lines to show. `None` means take the target file's imports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imports: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependencies: Option<Vec<ContextSnippet>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_body: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TaskLoadError {
    #[error("cannot read task file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error("{path}: duplicate task_id `{task_id}`")]
    DuplicateId { path: String, task_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFormat {
    #[default]
    Native,
    Deveval,
    Repoexec,
}

impl FromStr for TaskFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "native" => Ok(TaskFormat::Native),
            "deveval" => Ok(TaskFormat::Deveval),
            "repoexec" => Ok(TaskFormat::Repoexec),
            other => Err(format!("unknown task format `{other}` (expected native, deveval or repoexec)")),
        }
    }
}

/// Turns one JSON record of some benchmark format into a [`TaskRecord`].
pub trait TaskAdapter {
    fn adapt(&self, record: Value) -> Result<TaskRecord, String>;
}

pub struct NativeAdapter;
pub struct DevEvalAdapter;
pub struct RepoExecAdapter;

impl TaskAdapter for NativeAdapter {
    fn adapt(&self, record: Value) -> Result<TaskRecord, String> {
        serde_json::from_value(record).map_err(|e| e.to_string())
    }
}

fn str_field<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| v.get(*k).and_then(Value::as_str))
}

fn required<'a>(v: &'a Value, keys: &[&str]) -> Result<&'a str, String> {
    str_field(v, keys).ok_or_else(|| format!("missing field `{}`", keys[0]))
}

fn scalar_metadata(v: &Value, skip: &[&str]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Some(obj) = v.as_object() {
        for (k, val) in obj {
            if skip.contains(&k.as_str()) {
                continue;
            }
            match val {
                Value::String(s) => {
                    out.insert(k.clone(), s.clone());
                }
                Value::Number(n) => {
                    out.insert(k.clone(), n.to_string());
                }
                Value::Bool(b) => {
                    out.insert(k.clone(), b.to_string());
                }
                _ => {}
            }
        }
    }
    out
}

/// DevEval-style records: `namespace`, `project_path`, `requirement`
/// (`Functionality`, `Arguments`) and optional `type`/`domain` tags.
/// The signature and reference body come from the repository at run time.
impl TaskAdapter for DevEvalAdapter {
    fn adapt(&self, v: Value) -> Result<TaskRecord, String> {
        let namespace = required(&v, &["namespace"])?.to_string();
        let repo = required(&v, &["project_path", "project"])?.to_string();
        let mut description = String::new();
        match v.get("requirement") {
            Some(Value::Object(req)) => {
                for key in ["Functionality", "Arguments"] {
                    if let Some(s) = req.get(key).and_then(Value::as_str) {
                        if !description.is_empty() {
                            description.push('\n');
                        }
                        description.push_str(s.trim());
                    }
                }
            }
            Some(Value::String(s)) => description = s.trim().to_string(),
            _ => {}
        }
        let metadata = scalar_metadata(&v, &["namespace", "project_path", "completion_path"]);
        Ok(TaskRecord {
            task_id: namespace.clone(),
            repo,
            target: namespace,
            signature: String::new(),
            description,
            imports: None,
            dependencies: None,
            reference_body: None,
            metadata,
        })
    }
}

/// RepoExec-style records: `id`, `project`, `module`, `entry_point`,
/// `function_signature`, `docstring` and `solution`.
impl TaskAdapter for RepoExecAdapter {
    fn adapt(&self, v: Value) -> Result<TaskRecord, String> {
        let id = match v.get("id").or_else(|| v.get("task_id")) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err("missing field `id`".into()),
        };
        let repo = required(&v, &["project", "repo"])?.to_string();
        let entry = required(&v, &["entry_point"])?;
        let target = match str_field(&v, &["module"]) {
            Some(m) if !m.is_empty() => format!("{m}.{entry}"),
            _ => entry.to_string(),
        };
        let reference_body = str_field(&v, &["solution"]).map(|s| pyast::function_body_of(s, entry));
        let metadata = scalar_metadata(&v, &["id", "task_id", "project", "repo", "module", "entry_point", "solution",
            "function_signature", "docstring", "prompt", "check", "test"]);
        Ok(TaskRecord {
            task_id: id,
            repo,
            target,
            signature: str_field(&v, &["function_signature"]).unwrap_or("").trim().to_string(),
            description: str_field(&v, &["docstring"]).unwrap_or("").trim().to_string(),
            imports: None,
            dependencies: None,
            reference_body,
            metadata,
        })
    }
}

pub fn adapter_for(format: TaskFormat) -> Box<dyn TaskAdapter> {
    match format {
        TaskFormat::Native => Box::new(NativeAdapter),
        TaskFormat::Deveval => Box::new(DevEvalAdapter),
        TaskFormat::Repoexec => Box::new(RepoExecAdapter),
    }
}

/// Parses JSONL task text (blank lines ignored). Task ids must be unique.
pub fn parse_tasks(text: &str, format: TaskFormat, origin: &str) -> Result<Vec<TaskRecord>, TaskLoadError> {
    let adapter = adapter_for(format);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| TaskLoadError::Record { path: origin.to_string(), line: i + 1, message };
        let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let task = adapter.adapt(value).map_err(err)?;
        if !task.signature.is_empty() && parse_signature(&task.signature).is_none() {
            return Err(err(format!("signature of `{}` is not a function header", task.task_id)));
        }
        if !seen.insert(task.task_id.clone()) {
            return Err(TaskLoadError::DuplicateId { path: origin.to_string(), task_id: task.task_id });
        }
        out.push(task);
    }
    Ok(out)
}

pub fn load_tasks(path: &Path, format: TaskFormat) -> Result<Vec<TaskRecord>, TaskLoadError> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| TaskLoadError::Io { path: origin.clone(), source })?;
    parse_tasks(&text, format, &origin)
}

/// Finds the indexed function a task refers to: an exact qualified-name match,
/// otherwise the unique function whose qualified name is a dotted suffix of
/// the target or vice versa (benchmarks often prefix the project name).
pub fn resolve_target<'r>(repo: &'r Repository, target: &str) -> Option<&'r FunctionUnit> {
    if let Some(f) = repo.function(target) {
        return Some(f);
    }
    let dotted = |long: &str, short: &str| long.len() > short.len() && long.ends_with(short)
        && long.as_bytes()[long.len() - short.len() - 1] == b'.';
    let candidates = || repo.functions.values().filter(|f| !f.qualified_name.contains('#'));
    let longest_suffix = candidates()
        .filter(|f| dotted(target, &f.qualified_name))
        .max_by_key(|f| f.qualified_name.len());
    if longest_suffix.is_some() {
        return longest_suffix;
    }
    let mut extended = candidates().filter(|f| dotted(&f.qualified_name, target));
    match (extended.next(), extended.next()) {
        (Some(one), None) => Some(one),
        _ => None,
    }
}
