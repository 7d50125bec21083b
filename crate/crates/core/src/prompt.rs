//! Prompt assembly for the draft request and the final, context-enhanced request.

use std::collections::BTreeSet;
use std::path::Path;

use minijinja::Environment;
use serde::{Deserialize, Serialize};

use crate::backend::estimate_tokens;
use crate::pyast::{self, text};
use crate::retrieval::RetrievedSet;
use crate::source::{module_name, FunctionUnit, Repository};
use crate::task::{resolve_target, ContextSnippet, TaskRecord};

pub const SECTION_CONTEXT: &str = "# --- Imports and dependencies ---";
pub const SECTION_UPSTREAM: &str = "# --- Usage context (inlined callers) ---";
pub const SECTION_DOWNSTREAM: &str = "# --- Dependency functions (callees) ---";
pub const SECTION_GUIDANCE: &str = "# --- Confidence ---";
pub const SECTION_DRAFT: &str = "# Current implementation:";
pub const SECTION_TARGET: &str = "# --- Target function ---";

/// Delimiters in the order they must appear in a final prompt.
pub const SECTION_ORDER: [&str; 6] =
    [SECTION_CONTEXT, SECTION_UPSTREAM, SECTION_DOWNSTREAM, SECTION_GUIDANCE, SECTION_DRAFT, SECTION_TARGET];

const DEFAULT_DRAFT_TEMPLATE: &str = include_str!("../templates/draft.j2");
const DEFAULT_FINAL_TEMPLATE: &str = include_str!("../templates/final.j2");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("target `{0}` is neither in the repository nor described by the task")]
    MissingTarget(String),
    #[error("prompt needs {needed} tokens even with all optional context removed (budget {budget})")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("template error: {0}")]
    Template(String),
    #[error("cannot read template {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<minijinja::Error> for PromptError {
    fn from(e: minijinja::Error) -> Self {
        PromptError::Template(e.to_string())
    }
}

/// The draft and final templates. Wording lives in the template files.
pub struct Templates {
    env: Environment<'static>,
}

impl Templates {
    pub fn builtin() -> Self {
        Self::from_sources(DEFAULT_DRAFT_TEMPLATE.to_string(), DEFAULT_FINAL_TEMPLATE.to_string())
            .expect("built-in templates compile")
    }

    pub fn from_sources(draft: String, final_: String) -> Result<Self, PromptError> {
        let mut env = Environment::new();
        env.add_template_owned("draft", draft)?;
        env.add_template_owned("final", final_)?;
        Ok(Templates { env })
    }

    /// Loads `draft.j2` and `final.j2` from `dir`; a missing file keeps the built-in.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str, default: &str| -> Result<String, PromptError> {
            let path = dir.join(name);
            if path.exists() {
                std::fs::read_to_string(&path)
                    .map_err(|source| PromptError::TemplateIo { path: path.display().to_string(), source })
            } else {
                Ok(default.to_string())
            }
        };
        Self::from_sources(read("draft.j2", DEFAULT_DRAFT_TEMPLATE)?, read("final.j2", DEFAULT_FINAL_TEMPLATE)?)
    }

    fn render(&self, name: &str, ctx: minijinja::Value) -> Result<String, PromptError> {
        let mut out = self.env.get_template(name)?.render(ctx)?;
        if !out.ends_with('\n') {
            out.push('\n');
        }
        Ok(out)
    }
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl std::fmt::Debug for Templates {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Templates")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePrompt {
    pub imports: Vec<String>,
    pub dependencies: Vec<ContextSnippet>,
    pub target_signature: String,
    pub nl_description: String,
    /// Imports, dependencies and the open target function.
    pub rendered: String,
}

impl BasePrompt {
    /// The imports and dependency blocks, or empty.
    pub fn context_text(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if !self.imports.is_empty() {
            parts.push(self.imports.join("\n"));
        }
        parts.extend(self.dependencies.iter().map(|d| d.code.trim_end().to_string()));
        parts.join("\n\n")
    }

    /// Signature followed by the description as a docstring.
    pub fn target_text(&self) -> String {
        let mut out = self.target_signature.trim_end().to_string();
        let desc = self.nl_description.trim();
        if !desc.is_empty() {
            let indent = body_indent(&self.target_signature);
            let desc = desc.replace("\"\"\"", "\\\"\\\"\\\"");
            out.push('\n');
            out.push_str(&indent);
            out.push_str("\"\"\"");
            for (i, line) in desc.lines().enumerate() {
                if i > 0 {
                    out.push('\n');
                    if !line.trim().is_empty() {
                        out.push_str(&indent);
                    }
                }
                out.push_str(line.trim_end());
            }
            out.push_str("\"\"\"");
        }
        out
    }
}

/// Indentation for the body of a `def` whose header is `signature`.
pub fn body_indent(signature: &str) -> String {
    let def_line = signature.lines().find(|l| {
        let t = l.trim_start();
        t.starts_with("def ") || t.starts_with("async def ")
    });
    let ws = def_line.map_or("", |l| &l[..l.len() - l.trim_start().len()]);
    format!("{ws}    ")
}

/// Import-resolved functions of the repository that `file`'s imports bring in.
fn imported_functions<'r>(repo: &'r Repository, file: &str, imports: &[String]) -> Vec<&'r FunctionUnit> {
    let module = module_name(file);
    let is_package = file.ends_with("__init__.py");
    let mut out = Vec::new();
    for stmt in imports {
        let tree = pyast::parse(stmt);
        let root = tree.root_node();
        let Some(node) = root.named_child(0).filter(|n| n.kind() == "import_from_statement") else { continue };
        let Some(module_node) = node.child_by_field_name("module_name") else { continue };
        let raw = text(module_node, stmt);
        let resolved = if let Some(rest) = raw.strip_prefix('.') {
            let dots = 1 + rest.chars().take_while(|c| *c == '.').count();
            let rest = rest.trim_start_matches('.');
            let mut parts: Vec<&str> = module.split('.').collect();
            let up = if is_package { dots - 1 } else { dots };
            if up > parts.len() {
                continue;
            }
            parts.truncate(parts.len() - up);
            if !rest.is_empty() {
                parts.push(rest);
            }
            parts.join(".")
        } else {
            raw.to_string()
        };
        let mut cursor = node.walk();
        for name in node.children_by_field_name("name", &mut cursor) {
            let ident = match name.kind() {
                "aliased_import" => name.child_by_field_name("name").map_or("", |n| text(n, stmt)),
                _ => text(name, stmt),
            };
            let q = if resolved.is_empty() { ident.to_string() } else { format!("{resolved}.{ident}") };
            if let Some(f) = repo.function(&q) {
                out.push(f);
            }
        }
    }
    out
}

/// Imports, dependencies, signature and description for a task. Task-provided
/// fields win; anything missing is taken from the indexed repository.
pub fn build_base_prompt(repo: Option<&Repository>, task: &TaskRecord) -> Result<BasePrompt, PromptError> {
    let unit = repo.and_then(|r| resolve_target(r, &task.target));
    let target_signature = if !task.signature.trim().is_empty() {
        task.signature.trim_end().to_string()
    } else if let Some(u) = unit {
        u.signature_text.trim_end().to_string()
    } else {
        return Err(PromptError::MissingTarget(task.target.clone()));
    };
    let nl_description = if !task.description.trim().is_empty() {
        task.description.trim().to_string()
    } else {
        unit.and_then(|u| u.docstring.as_deref()).map(|d| pyast::dedent(d).trim().to_string()).unwrap_or_default()
    };
    let file = unit.zip(repo).and_then(|(u, r)| r.file(&u.file));
    let imports = match &task.imports {
        Some(i) => i.clone(),
        None => file.map(|f| f.imports.clone()).unwrap_or_default(),
    };
    let mut seen = BTreeSet::new();
    let mut dependencies = Vec::new();
    match &task.dependencies {
        Some(deps) => {
            for d in deps {
                if seen.insert(d.name.clone()) {
                    dependencies.push(d.clone());
                }
            }
        }
        None => {
            if let (Some(r), Some(f)) = (repo, file) {
                for dep in imported_functions(r, &f.path, &imports) {
                    if unit.is_some_and(|u| u.qualified_name == dep.qualified_name) {
                        continue;
                    }
                    if seen.insert(dep.qualified_name.clone()) {
                        dependencies.push(ContextSnippet { name: dep.qualified_name.clone(), code: r.source_of(dep) });
                    }
                }
            }
        }
    }
    let mut base = BasePrompt { imports, dependencies, target_signature, nl_description, rendered: String::new() };
    let context = base.context_text();
    let mut rendered = String::new();
    if !context.is_empty() {
        rendered.push_str(&context);
        rendered.push_str("\n\n");
    }
    rendered.push_str(&base.target_text());
    rendered.push('\n');
    base.rendered = rendered;
    Ok(base)
}

/// Stage-one prompt asking for a draft body and its callee list.
pub fn build_draft_prompt(templates: &Templates, base: &BasePrompt) -> Result<String, PromptError> {
    templates.render(
        "draft",
        minijinja::context! { context => base.context_text(), target => base.target_text() },
    )
}

/// A retrieved function in full and reduced to signature plus docstring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownstreamEntry {
    pub qualified_name: String,
    pub full: String,
    pub summary: String,
}

fn summary_of(f: &FunctionUnit) -> String {
    let mut out = f.signature_text.trim_end().to_string();
    let indent = body_indent(&f.signature_text);
    let body = pyast::dedent(&f.body_text);
    let tree = pyast::parse(&body);
    let doc = tree
        .root_node()
        .named_child(0)
        .filter(|n| n.kind() == "expression_statement" && n.named_child_count() == 1)
        .and_then(|n| n.named_child(0))
        .filter(|s| s.kind() == "string")
        .map(|s| text(s, &body).to_string());
    if f.docstring.is_some() {
        if let Some(doc) = doc {
            out.push('\n');
            out.push_str(&pyast::indent(&doc, &indent, false));
        }
    }
    out.push('\n');
    out.push_str(&indent);
    out.push_str("...");
    out
}

/// Retrieved functions in rank order, with their full and reduced forms.
pub fn downstream_entries(repo: &Repository, retrieved: &RetrievedSet) -> Vec<DownstreamEntry> {
    retrieved
        .functions
        .iter()
        .filter_map(|r| repo.function(&r.qualified_name))
        .map(|f| DownstreamEntry {
            qualified_name: f.qualified_name.clone(),
            full: repo.source_of(f).trim_end().to_string(),
            summary: summary_of(f),
        })
        .collect()
}

/// What the budget ladder removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub dropped_upstream: usize,
    pub summarized_downstream: usize,
    pub dropped_downstream: usize,
}

impl Truncation {
    pub fn any(&self) -> bool {
        self.dropped_upstream + self.summarized_downstream + self.dropped_downstream > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub base: BasePrompt,
    pub upstream_blocks: Vec<String>,
    pub downstream_blocks: Vec<String>,
    pub guidance: Option<String>,
    pub draft: Option<String>,
    pub rendered: String,
    pub token_estimate: usize,
    pub truncation: Truncation,
}

/// Everything that can go into a final prompt besides the base.
#[derive(Debug, Clone, Default)]
pub struct FinalParts {
    pub upstream: Vec<String>,
    pub downstream: Vec<DownstreamEntry>,
    pub guidance: Option<String>,
    pub draft: Option<String>,
}

fn render_final(
    templates: &Templates,
    base: &BasePrompt,
    upstream: &[String],
    downstream: &[String],
    guidance: Option<&str>,
    draft: Option<&str>,
) -> Result<String, PromptError> {
    let join = |blocks: &[String]| blocks.iter().map(|b| b.trim_end()).collect::<Vec<_>>().join("\n\n");
    templates.render(
        "final",
        minijinja::context! {
            context => base.context_text(),
            upstream => join(upstream),
            downstream => join(downstream),
            guidance => guidance.unwrap_or(""),
            draft => draft.map(|d| d.trim_end()).unwrap_or(""),
            target => base.target_text(),
        },
    )
}

/// Renders the final prompt under `budget` tokens.
///
/// Over budget, inlined callers are dropped longest first, then retrieved
/// functions are reduced to signature and docstring from the lowest rank up,
/// then dropped from the lowest rank up. Guidance and draft always stay.
pub fn build_final_prompt(
    templates: &Templates,
    base: &BasePrompt,
    parts: &FinalParts,
    budget: usize,
) -> Result<PromptBundle, PromptError> {
    let mut upstream = parts.upstream.clone();
    let mut downstream: Vec<String> = parts.downstream.iter().map(|d| d.full.clone()).collect();
    let (guidance, draft) = (parts.guidance.as_deref(), parts.draft.as_deref());
    let mut truncation = Truncation::default();
    let mut summarized = 0;
    loop {
        let rendered = render_final(templates, base, &upstream, &downstream, guidance, draft)?;
        let tokens = estimate_tokens(&rendered);
        if tokens <= budget {
            return Ok(PromptBundle {
                base: base.clone(),
                upstream_blocks: upstream,
                downstream_blocks: downstream,
                guidance: parts.guidance.clone(),
                draft: parts.draft.clone(),
                rendered,
                token_estimate: tokens,
                truncation,
            });
        }
        if let Some(longest) = (0..upstream.len()).max_by_key(|&i| (upstream[i].len(), std::cmp::Reverse(i))) {
            upstream.remove(longest);
            truncation.dropped_upstream += 1;
        } else if summarized < downstream.len() {
            let idx = downstream.len() - 1 - summarized;
            downstream[idx] = parts.downstream[idx].summary.clone();
            summarized += 1;
            truncation.summarized_downstream = summarized;
        } else if !downstream.is_empty() {
            downstream.pop();
            summarized -= 1;
            truncation.summarized_downstream = summarized;
            truncation.dropped_downstream += 1;
        } else {
            return Err(PromptError::BudgetTooSmall { needed: tokens, budget });
        }
    }
}

/// True when every section delimiter present appears at most once and in order.
pub fn sections_in_order(rendered: &str) -> bool {
    let mut last = 0;
    for delim in SECTION_ORDER {
        let lines: Vec<usize> = rendered
            .lines()
            .enumerate()
            .filter(|(_, l)| *l == delim)
            .map(|(i, _)| i + 1)
            .collect();
        match lines.as_slice() {
            [] => {}
            [one] if *one > last => last = *one,
            _ => return false,
        }
    }
    true
}

/// Section delimiters present in a rendered prompt.
pub fn sections_present(rendered: &str) -> Vec<&'static str> {
    SECTION_ORDER.into_iter().filter(|d| rendered.lines().any(|l| l == *d)).collect()
}

/// Text of one section: the lines after its delimiter up to the next one.
pub fn section_text<'a>(rendered: &'a str, delim: &str) -> Option<&'a str> {
    let start = rendered.lines().position(|l| l == delim)?;
    let mut offset = 0;
    let mut from = None;
    let mut to = rendered.len();
    for (i, line) in rendered.split_inclusive('\n').enumerate() {
        if i == start + 1 {
            from = Some(offset);
        }
        if i > start && SECTION_ORDER.contains(&line.trim_end_matches('\n')) {
            to = offset;
            break;
        }
        offset += line.len();
    }
    Some(rendered[from.unwrap_or(rendered.len()).min(to)..to].trim_matches('\n'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::{HIGH_CONFIDENCE_GUIDANCE, MEDIUM_CONFIDENCE_GUIDANCE};
    use crate::retrieval::RetrievedFunction;
    use crate::source::index_sources;

    fn task(target: &str) -> TaskRecord {
        TaskRecord {
            task_id: "t".into(),
            repo: "r".into(),
            target: target.into(),
            signature: String::new(),
            description: String::new(),
            imports: None,
            dependencies: None,
            reference_body: None,
            metadata: Default::default(),
        }
    }

    #[test]
    fn bare_base_prompt() {
        let t = TaskRecord { signature: "def f(x):".into(), description: "Doubles x.".into(), ..task("m.f") };
        let b = build_base_prompt(None, &t).unwrap();
        assert_eq!(b.rendered, "def f(x):\n    \"\"\"Doubles x.\"\"\"\n");
        assert!(build_base_prompt(None, &task("m.g")).is_err());
    }

    #[test]
    fn imports_keep_order_and_dependencies_dedupe() {
        let dep = ContextSnippet { name: "a.f".into(), code: "def f():\n    return 1".into() };
        let t = TaskRecord {
            signature: "def g():".into(),
            imports: Some(vec!["import os".into(), "from a import f".into()]),
            dependencies: Some(vec![dep.clone(), dep]),
            ..task("m.g")
        };
        let b = build_base_prompt(None, &t).unwrap();
        assert_eq!(b.dependencies.len(), 1);
        assert_eq!(b.rendered, "import os\nfrom a import f\n\ndef f():\n    return 1\n\ndef g():\n");
    }

    #[test]
    fn base_prompt_from_repository() {
        let repo = index_sources(
            Path::new("/r"),
            [
                ("pkg/__init__.py", ""),
                ("pkg/util.py", "def helper(x):\n    \"\"\"Helps.\"\"\"\n    return x\n"),
                ("pkg/main.py", "import os\nfrom .util import helper as h\n\nclass C:\n    def run(self, p):\n        \"\"\"Runs p.\"\"\"\n        return h(p)\n"),
            ],
        );
        let b = build_base_prompt(Some(&repo), &task("pkg.main.C.run")).unwrap();
        assert_eq!(b.imports, ["import os", "from .util import helper as h"]);
        assert_eq!(b.dependencies[0].name, "pkg.util.helper");
        assert_eq!(b.target_signature, "def run(self, p):");
        assert_eq!(b.nl_description, "Runs p.");
        assert!(!b.rendered.contains("return h(p)"), "reference body must not leak");
    }

    #[test]
    fn degenerate_final_prompt() {
        let t = TaskRecord { signature: "def f():".into(), ..task("m.f") };
        let base = build_base_prompt(None, &t).unwrap();
        let parts = FinalParts {
            guidance: Some(HIGH_CONFIDENCE_GUIDANCE.into()),
            draft: Some("return 1".into()),
            ..Default::default()
        };
        let b = build_final_prompt(&Templates::builtin(), &base, &parts, 10_000).unwrap();
        assert_eq!(sections_present(&b.rendered), [SECTION_GUIDANCE, SECTION_DRAFT, SECTION_TARGET]);
        assert!(b.rendered.ends_with("# --- Target function ---\ndef f():\n"));
        assert_eq!(section_text(&b.rendered, SECTION_DRAFT), Some("return 1"));
        assert!(!b.truncation.any());
    }

    fn rich_parts(repo: &Repository) -> FinalParts {
        let retrieved = RetrievedSet {
            functions: vec![RetrievedFunction {
                qualified_name: "lib.load".into(),
                simple_name: "load".into(),
                file: "lib.py".into(),
            }],
            ..Default::default()
        };
        FinalParts {
            upstream: vec!["def a():\n    x = 1\n    return x".into(), "def b():\n    y = 2".into()],
            downstream: downstream_entries(repo, &retrieved),
            guidance: Some(MEDIUM_CONFIDENCE_GUIDANCE.into()),
            draft: Some("return load(p)".into()),
        }
    }

    const LIB: &str = "def load(p):\n    \"\"\"Reads p.\"\"\"\n    with open(p) as fh:\n        data = fh.read()\n    return data.strip().splitlines()\n";

    #[test]
    fn all_sections_in_order() {
        let repo = index_sources(Path::new("/r"), [("lib.py", LIB)]);
        let t = TaskRecord {
            signature: "def f(p):".into(),
            imports: Some(vec!["import lib".into()]),
            ..task("m.f")
        };
        let base = build_base_prompt(None, &t).unwrap();
        let b = build_final_prompt(&Templates::builtin(), &base, &rich_parts(&repo), 10_000).unwrap();
        assert_eq!(sections_present(&b.rendered), SECTION_ORDER);
        assert!(sections_in_order(&b.rendered));
        assert_eq!(
            section_text(&b.rendered, SECTION_UPSTREAM),
            Some("def a():\n    x = 1\n    return x\n\ndef b():\n    y = 2")
        );
        assert_eq!(section_text(&b.rendered, SECTION_DOWNSTREAM), Some(LIB.trim_end()));
        let again = build_final_prompt(&Templates::builtin(), &base, &rich_parts(&repo), 10_000).unwrap();
        assert_eq!(b.rendered, again.rendered);
    }

    #[test]
    fn truncation_ladder() {
        let repo = index_sources(Path::new("/r"), [("lib.py", LIB)]);
        let base = build_base_prompt(None, &TaskRecord { signature: "def f(p):".into(), ..task("m.f") }).unwrap();
        let parts = rich_parts(&repo);
        let t = Templates::builtin();
        let full = build_final_prompt(&t, &base, &parts, 10_000).unwrap().token_estimate;
        let without_up = build_final_prompt(&t, &base, &FinalParts { upstream: vec![], ..parts.clone() }, 10_000)
            .unwrap()
            .token_estimate;

        let b = build_final_prompt(&t, &base, &parts, full - 1).unwrap();
        assert_eq!(b.truncation.dropped_upstream, 1);
        assert_eq!(b.upstream_blocks, ["def b():\n    y = 2"]);

        let b = build_final_prompt(&t, &base, &parts, without_up - 1).unwrap();
        assert_eq!(b.truncation, Truncation { dropped_upstream: 2, summarized_downstream: 1, dropped_downstream: 0 });
        assert_eq!(b.downstream_blocks, ["def load(p):\n    \"\"\"Reads p.\"\"\"\n    ..."]);

        let bare = build_final_prompt(&t, &base, &FinalParts { upstream: vec![], downstream: vec![], ..parts.clone() }, 10_000)
            .unwrap()
            .token_estimate;
        let b = build_final_prompt(&t, &base, &parts, bare).unwrap();
        assert_eq!(b.truncation.dropped_downstream, 1);
        assert!(b.guidance.is_some() && b.draft.is_some());
        assert!(matches!(
            build_final_prompt(&t, &base, &parts, bare - 1),
            Err(PromptError::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn order_checker() {
        assert!(sections_in_order("# --- Confidence ---\nx\n# --- Target function ---\n"));
        assert!(!sections_in_order("# --- Target function ---\n# --- Confidence ---\n"));
        assert!(!sections_in_order("# --- Target function ---\n# --- Target function ---\n"));
    }

    #[test]
    fn draft_prompt_asks_for_callees() {
        let base = build_base_prompt(None, &TaskRecord { signature: "def f():".into(), ..task("m.f") }).unwrap();
        let p = build_draft_prompt(&Templates::builtin(), &base).unwrap();
        assert!(p.contains("CALLEES:"));
        assert!(p.ends_with("# --- Target function ---\ndef f():\n"));
    }
}
