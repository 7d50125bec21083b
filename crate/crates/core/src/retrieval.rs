//! Downstream retrieval: which repository functions might the target call?
//!
//! Queries come from two sources, the call targets found in the draft and the
//! callee names the model listed alongside it. A repository function is a
//! candidate when some query is a substring of its simple name.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::lexer::{self, TokenKind};
use crate::pyast::{self, text};
use crate::source::{FunctionUnit, Repository};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub ast_queries: BTreeSet<String>,
    pub llm_queries: BTreeSet<String>,
    pub merged: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedFunction {
    pub qualified_name: String,
    pub simple_name: String,
    pub file: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub functions: Vec<RetrievedFunction>,
    pub matched_by: BTreeMap<String, Vec<String>>,
    pub truncated: bool,
}

impl RetrievedSet {
    pub fn names(&self) -> BTreeSet<&str> {
        self.functions.iter().map(|f| f.qualified_name.as_str()).collect()
    }
}

/// Final identifiers of every call target in the draft (`f` for `a.b.f(...)`).
/// Drafts that do not parse fall back to names immediately followed by `(`.
pub fn extract_ast_queries(draft_body: &str) -> BTreeSet<String> {
    let body = pyast::dedent(draft_body);
    let tree = pyast::parse(&body);
    let root = tree.root_node();
    let mut out = BTreeSet::new();
    if root.has_error() {
        let tokens = lexer::tokenize(draft_body);
        for pair in tokens.windows(2) {
            if pair[0].kind == TokenKind::Name && pair[1].text == "(" && !lexer::is_keyword(pair[0].text) {
                out.insert(pair[0].text.to_string());
            }
        }
        return out;
    }
    pyast::walk_all(root, |n| {
        if n.kind() != "call" {
            return;
        }
        let Some(function) = n.child_by_field_name("function") else { return };
        let name = match function.kind() {
            "identifier" => Some(function),
            "attribute" => function.child_by_field_name("attribute"),
            _ => None,
        };
        if let Some(name) = name {
            out.insert(text(name, &body).to_string());
        }
    });
    out
}

/// `merged` is exactly the union of both sources.
pub fn merge_queries(ast_q: BTreeSet<String>, llm_q: BTreeSet<String>) -> QuerySet {
    let clean = |q: BTreeSet<String>| -> BTreeSet<String> { q.into_iter().filter(|s| !s.is_empty()).collect() };
    let (ast_queries, llm_queries) = (clean(ast_q), clean(llm_q));
    let merged = ast_queries.union(&llm_queries).cloned().collect();
    QuerySet { ast_queries, llm_queries, merged }
}

/// Queries actually used for matching: one-character queries match almost
/// every name and are dropped.
pub fn effective_queries(q: &QuerySet) -> impl Iterator<Item = &str> {
    q.merged.iter().map(String::as_str).filter(|s| s.chars().count() > 1)
}

/// Case-sensitive substring match of queries against simple names, minus the
/// target and nested functions. Exact-name matches rank first, then shorter
/// names, then path order.
pub fn retrieve_callees(repo: &Repository, q: &QuerySet, target: &str, cap: usize) -> RetrievedSet {
    let queries: Vec<&str> = effective_queries(q).collect();
    let target_base = crate::source::base_name(target);
    let mut hits: Vec<(&FunctionUnit, Vec<String>)> = repo
        .functions
        .values()
        .filter(|f| f.retrievable() && f.qualified_name != target && f.qualified_name != target_base)
        .filter_map(|f| {
            let matched: Vec<String> =
                queries.iter().filter(|q| f.simple_name.contains(**q)).map(|q| q.to_string()).collect();
            (!matched.is_empty()).then_some((f, matched))
        })
        .collect();
    hits.sort_by(|(a, _), (b, _)| {
        let exact = |f: &FunctionUnit| !q.merged.contains(&f.simple_name);
        (exact(a), a.simple_name.len(), &a.file, a.node_start).cmp(&(exact(b), b.simple_name.len(), &b.file, b.node_start))
    });
    let truncated = hits.len() > cap;
    hits.truncate(cap);
    let mut out = RetrievedSet { truncated, ..Default::default() };
    for (f, matched) in hits {
        out.matched_by.insert(f.qualified_name.clone(), matched);
        out.functions.push(RetrievedFunction {
            qualified_name: f.qualified_name.clone(),
            simple_name: f.simple_name.clone(),
            file: f.file.clone(),
        });
    }
    out
}
