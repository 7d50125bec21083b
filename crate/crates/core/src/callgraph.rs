//! Name-based call graph over a [`Repository`].
//!
//! A call `a.b.f(...)` is an edge to every repository function whose simple
//! name is `f`. Calls through subscripts, call results or other dynamic
//! targets are skipped and counted.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tree_sitter::Node;

use crate::pyast::{self, text};
use crate::source::{FunctionUnit, Repository};

/// How the value of a call is consumed by its statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    /// `target = f(...)`
    Assignment { target: String },
    /// `f(...)` as a statement on its own.
    ExpressionStatement,
    /// Anything else; `statement` is the enclosing statement (header only for
    /// compound statements).
    Subexpression { statement: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub file: String,
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    pub caller: String,
    pub callee_name_expr: String,
    /// Final identifier of the call target (`f` for `a.b.f`).
    pub callee_name: String,
    /// Receiver expression for attribute calls (`a.b` for `a.b.f(...)`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receiver: Option<String>,
    /// Positional argument texts in source order; star-args keep their `*`.
    pub args: Vec<String>,
    pub keyword_args: BTreeMap<String, String>,
    pub binding: Binding,
    pub location: Location,
    /// Byte range of the call expression in the file.
    pub call_span: (usize, usize),
    /// Byte range of the enclosing statement in the file.
    pub statement_span: (usize, usize),
    /// Set when the call cannot be hoisted out of its statement without
    /// changing scoping or evaluation order; holds the reason.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hoist_blocker: Option<String>,
}

impl CallSite {
    pub fn has_star_args(&self) -> bool {
        self.args.iter().any(|a| a.starts_with('*')) || self.keyword_args.keys().any(|k| k.starts_with("**"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDiagnostics {
    pub dynamic_calls_skipped: usize,
    pub unresolved_calls: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CallGraph {
    /// Edges sorted by (file, byte offset).
    pub edges: Vec<CallSite>,
    /// Callee simple name -> indices into `edges`.
    pub callers_index: BTreeMap<String, Vec<usize>>,
    /// Caller qualified name -> indices into `edges`.
    pub callees_index: BTreeMap<String, Vec<usize>>,
    pub diagnostics: GraphDiagnostics,
}

/// One result of [`find_callers`].
#[derive(Debug, Clone, Copy)]
pub struct CallerRef<'a> {
    pub caller: &'a FunctionUnit,
    pub site: &'a CallSite,
    pub self_recursive: bool,
}

/// JSONL row emitted by the `graph` command.
#[derive(Debug, Serialize)]
pub struct EdgeRecord<'a> {
    pub caller: &'a str,
    pub callee_expr: &'a str,
    pub file: &'a str,
    pub line: usize,
    pub binding: &'a Binding,
}

impl CallGraph {
    pub fn edge_records(&self) -> impl Iterator<Item = EdgeRecord<'_>> {
        self.edges.iter().map(|e| EdgeRecord {
            caller: &e.caller,
            callee_expr: &e.callee_name_expr,
            file: &e.location.file,
            line: e.location.line,
            binding: &e.binding,
        })
    }

    pub fn callees_of(&self, caller: &str) -> impl Iterator<Item = &CallSite> {
        self.callees_index.get(caller).into_iter().flatten().map(|&i| &self.edges[i])
    }

    /// Simple-name adjacency: caller qualified name -> callee simple names.
    pub fn adjacency(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut adj: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for e in &self.edges {
            adj.entry(e.caller.clone()).or_default().insert(e.callee_name.clone());
        }
        adj
    }
}

pub fn build_call_graph(repo: &Repository) -> CallGraph {
    let names = repo.simple_names();
    // (file, node_start) -> qualified name
    let owners: HashMap<(&str, usize), &str> =
        repo.functions.values().map(|f| ((f.file.as_str(), f.node_start), f.qualified_name.as_str())).collect();

    let per_file: Vec<(Vec<CallSite>, GraphDiagnostics)> = repo
        .files
        .par_iter()
        .filter(|f| f.parse_ok)
        .map(|file| {
            let tree = pyast::parse(&file.text);
            let mut ctx = FileCtx { src: &file.text, path: &file.path, names: &names, owners: &owners, sites: Vec::new(), diag: GraphDiagnostics::default() };
            ctx.visit(tree.root_node(), None);
            (ctx.sites, ctx.diag)
        })
        .collect();

    let mut graph = CallGraph::default();
    for (sites, diag) in per_file {
        graph.edges.extend(sites);
        graph.diagnostics.dynamic_calls_skipped += diag.dynamic_calls_skipped;
        graph.diagnostics.unresolved_calls += diag.unresolved_calls;
    }
    graph.edges.sort_by(|a, b| (&a.location.file, a.call_span.0).cmp(&(&b.location.file, b.call_span.0)));
    for (i, e) in graph.edges.iter().enumerate() {
        graph.callers_index.entry(e.callee_name.clone()).or_default().push(i);
        graph.callees_index.entry(e.caller.clone()).or_default().push(i);
    }
    graph
}

struct FileCtx<'a> {
    src: &'a str,
    path: &'a str,
    names: &'a BTreeSet<&'a str>,
    owners: &'a HashMap<(&'a str, usize), &'a str>,
    sites: Vec<CallSite>,
    diag: GraphDiagnostics,
}

impl FileCtx<'_> {
    fn visit(&mut self, node: Node<'_>, owner: Option<&str>) {
        match node.kind() {
            "function_definition" => {
                // Decorators, defaults and annotations evaluate in the enclosing
                // scope; the body belongs to this function.
                let me = self.owners.get(&(self.path, node.start_byte())).copied();
                for child in pyast::children(node) {
                    if node.child_by_field_name("body").is_some_and(|b| b.id() == child.id()) {
                        let me = me.map(str::to_string);
                        self.visit(child, me.as_deref());
                    } else {
                        self.visit(child, owner);
                    }
                }
            }
            "class_definition" => {
                // Class bodies are not functions; methods inside are found by
                // the function_definition case.
                for child in pyast::children(node) {
                    self.visit(child, None);
                }
            }
            "call" => {
                if let Some(owner) = owner {
                    self.record_call(node, owner);
                }
                for child in pyast::children(node) {
                    self.visit(child, owner);
                }
            }
            _ => {
                for child in pyast::children(node) {
                    self.visit(child, owner);
                }
            }
        }
    }

    fn record_call(&mut self, call: Node<'_>, owner: &str) {
        let src = self.src;
        let Some(function) = call.child_by_field_name("function") else { return };
        let (callee_name, receiver) = match function.kind() {
            "identifier" => (text(function, src), None),
            "attribute" => {
                let attr = function.child_by_field_name("attribute").map_or("", |a| text(a, src));
                let object = function.child_by_field_name("object").map(|o| text(o, src).to_string());
                (attr, object)
            }
            _ => {
                self.diag.dynamic_calls_skipped += 1;
                return;
            }
        };
        if !self.names.contains(callee_name) {
            self.diag.unresolved_calls += 1;
            return;
        }
        let (args, keyword_args) = call_arguments(call, src);
        let statement = enclosing_statement(call);
        let binding = classify_binding(call, statement, src);
        let hoist_blocker = hoist_blocker(call, statement, src);
        let pos = call.start_position();
        self.sites.push(CallSite {
            caller: owner.to_string(),
            callee_name_expr: text(function, src).to_string(),
            callee_name: callee_name.to_string(),
            receiver,
            args,
            keyword_args,
            binding,
            location: Location { file: self.path.to_string(), line: pos.row + 1, column: pos.column },
            call_span: (call.start_byte(), call.end_byte()),
            statement_span: (statement.start_byte(), statement.end_byte()),
            hoist_blocker,
        });
    }
}

pub fn call_arguments(call: Node<'_>, src: &str) -> (Vec<String>, BTreeMap<String, String>) {
    let mut args = Vec::new();
    let mut kwargs = BTreeMap::new();
    let Some(arguments) = call.child_by_field_name("arguments") else {
        return (args, kwargs);
    };
    if arguments.kind() == "generator_expression" {
        args.push(text(arguments, src).to_string());
        return (args, kwargs);
    }
    for arg in pyast::named_children(arguments) {
        match arg.kind() {
            "keyword_argument" => {
                let name = arg.child_by_field_name("name").map_or("", |n| text(n, src));
                let value = arg.child_by_field_name("value").map_or("", |v| text(v, src));
                kwargs.insert(name.to_string(), value.to_string());
            }
            "dictionary_splat" => {
                kwargs.insert(text(arg, src).to_string(), String::new());
            }
            "comment" => {}
            _ => args.push(text(arg, src).to_string()),
        }
    }
    (args, kwargs)
}

/// Nearest ancestor that is a statement directly inside a block or module.
pub fn enclosing_statement(node: Node<'_>) -> Node<'_> {
    let mut current = node;
    while let Some(parent) = current.parent() {
        if matches!(parent.kind(), "block" | "module") {
            return current;
        }
        current = parent;
    }
    current
}

fn classify_binding(call: Node<'_>, statement: Node<'_>, src: &str) -> Binding {
    if statement.kind() == "expression_statement" && statement.named_child_count() == 1 {
        let inner = statement.named_child(0).expect("one named child");
        if inner.id() == call.id() {
            return Binding::ExpressionStatement;
        }
        if inner.kind() == "assignment"
            && inner.child_by_field_name("right").is_some_and(|r| r.id() == call.id())
        {
            if let Some(left) = inner.child_by_field_name("left") {
                return Binding::Assignment { target: text(left, src).to_string() };
            }
        }
    }
    Binding::Subexpression { statement: statement_header(statement, src).to_string() }
}

/// A simple statement's text, or a compound statement's header line(s).
pub fn statement_header<'a>(statement: Node<'_>, src: &'a str) -> &'a str {
    let end = statement
        .child_by_field_name("body")
        .or_else(|| statement.child_by_field_name("consequence"))
        .map_or(statement.end_byte(), |b| b.start_byte());
    src[statement.start_byte()..end].trim_end()
}

fn hoist_blocker(call: Node<'_>, statement: Node<'_>, src: &str) -> Option<String> {
    let line_start = pyast::line_start(src, statement.start_byte());
    if !src[line_start..statement.start_byte()].trim().is_empty() {
        return Some("statement shares its line with other code".into());
    }
    let mut current = call;
    while let Some(parent) = current.parent() {
        if parent.id() == statement.id() {
            break;
        }
        let kind = parent.kind();
        if kind == "lambda" || pyast::is_comprehension(kind) {
            return Some(format!("call inside {kind}"));
        }
        if matches!(kind, "elif_clause" | "decorator") {
            return Some(format!("call inside {kind} header"));
        }
        let lazy = match kind {
            "boolean_operator" => parent.child_by_field_name("right").is_some_and(|r| r.id() == current.id()),
            "conditional_expression" => parent.named_child(1).is_none_or(|c| c.id() != current.id()),
            _ => false,
        };
        if lazy {
            return Some(format!("call is conditionally evaluated inside {kind}"));
        }
        current = parent;
    }
    if statement.kind() == "while_statement"
        && statement.child_by_field_name("body").is_some_and(|b| call.start_byte() < b.start_byte())
    {
        return Some("call in a while condition".into());
    }
    None
}

/// All call sites that may invoke `target` (matched by simple name), paired
/// with their enclosing caller. Self-recursive sites are included and flagged.
pub fn find_callers<'a>(repo: &'a Repository, graph: &'a CallGraph, target: &str) -> Vec<CallerRef<'a>> {
    let Some(unit) = repo.function(target) else {
        log::warn!("find_callers: unknown target {target}");
        return Vec::new();
    };
    callers_by_name(repo, graph, &unit.simple_name, target)
}

/// Like [`find_callers`] for a target that may not be indexed (e.g. a task
/// whose function body was removed from the repository).
pub fn callers_by_name<'a>(
    repo: &'a Repository,
    graph: &'a CallGraph,
    simple_name: &str,
    target_qualified: &str,
) -> Vec<CallerRef<'a>> {
    graph
        .callers_index
        .get(simple_name)
        .into_iter()
        .flatten()
        .filter_map(|&i| {
            let site = &graph.edges[i];
            let caller = repo.function(&site.caller)?;
            Some(CallerRef { caller, site, self_recursive: site.caller == target_qualified })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::index_sources;
    use std::path::Path;

    fn graph_of(sources: &[(&str, &str)]) -> (Repository, CallGraph) {
        let repo = index_sources(Path::new("/r"), sources.iter().copied());
        let g = build_call_graph(&repo);
        (repo, g)
    }

    #[test]
    fn no_calls_no_edges() {
        let (_, g) = graph_of(&[("a.py", "def f():\n    return 1\ndef g():\n    return 2\n")]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn subexpression_edge() {
        let (_, g) = graph_of(&[("a.py", "def f(x):\n    return x\ndef g():\n    return f(1)\n")]);
        assert_eq!(g.edges.len(), 1);
        let e = &g.edges[0];
        assert_eq!((e.caller.as_str(), e.callee_name.as_str()), ("a.g", "f"));
        assert_eq!(e.args, ["1"]);
        assert_eq!(e.binding, Binding::Subexpression { statement: "return f(1)".into() });
        assert_eq!(e.location.line, 4);
    }

    #[test]
    fn method_style_call_matches_final_attribute() {
        let (_, g) = graph_of(&[(
            "a.py",
            "class G:\n    def dfs_paths(self, x):\n        return [x]\n\ndef use(obj, x):\n    y = obj.dfs_paths(x)\n    return y\n",
        )]);
        let e = &g.edges[0];
        assert_eq!(e.callee_name, "dfs_paths");
        assert_eq!(e.receiver.as_deref(), Some("obj"));
        assert_eq!(e.binding, Binding::Assignment { target: "y".into() });
        assert_eq!(g.callers_index["dfs_paths"], [0]);
    }

    #[test]
    fn dynamic_and_unresolved_tallied() {
        let (_, g) = graph_of(&[("a.py", "def f():\n    xs[0]()\n    print(1)\n    f()\n")]);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.diagnostics, GraphDiagnostics { dynamic_calls_skipped: 1, unresolved_calls: 1 });
    }

    #[test]
    fn find_callers_cases() {
        let src = "def t(x):\n    return t(x - 1)\ndef c(y):\n    a = t(y)\n    t(a)\n    return a\ndef lone():\n    pass\n";
        let (repo, g) = graph_of(&[("m.py", src)]);
        assert!(find_callers(&repo, &g, "m.lone").is_empty());
        assert!(find_callers(&repo, &g, "m.nope").is_empty());
        let callers = find_callers(&repo, &g, "m.t");
        assert_eq!(callers.len(), 3);
        assert!(callers[0].self_recursive);
        assert_eq!(callers[1].caller.qualified_name, "m.c");
        assert_eq!(callers[2].caller.qualified_name, "m.c");
        assert_ne!(callers[1].site.call_span, callers[2].site.call_span);
        assert_eq!(callers[2].site.binding, Binding::ExpressionStatement);
    }

    #[test]
    fn lambdas_attribute_to_enclosing_function() {
        let (_, g) = graph_of(&[("a.py", "def f(x):\n    return x\ndef g(xs):\n    return [f(v) for v in xs]\n")]);
        assert_eq!(g.edges[0].caller, "a.g");
        assert!(g.edges[0].hoist_blocker.as_deref().unwrap().contains("comprehension"));
    }

    #[test]
    fn module_level_calls_have_no_caller() {
        let (_, g) = graph_of(&[("a.py", "def f():\n    pass\nf()\n")]);
        assert!(g.edges.is_empty());
    }
}
