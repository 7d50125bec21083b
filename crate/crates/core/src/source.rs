//! Repository indexing: files, imports and function units.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use globset::{Glob, GlobSet, GlobSetBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tree_sitter::Node;
use walkdir::WalkDir;

use crate::lexer::{self, TokenKind};
use crate::pyast::{self, text};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("repository root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("invalid include pattern {pattern:?}: {source}")]
    BadGlob {
        pattern: String,
        #[source]
        source: globset::Error,
    },
    #[error("failed to walk {path}: {source}")]
    Walk {
        path: PathBuf,
        #[source]
        source: walkdir::Error,
    },
}

pub const DEFAULT_INCLUDE: &str = "**/*.py";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repository {
    pub root_path: PathBuf,
    pub files: Vec<SourceFile>,
    pub functions: BTreeMap<String, FunctionUnit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFile {
    /// Repository-relative path, `/`-separated.
    pub path: String,
    pub text: String,
    pub imports: Vec<String>,
    pub parse_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Positional,
    KeywordWithDefault,
    Varargs,
    Kwargs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    /// Declared after a bare `*` or `*args`: bindable only by keyword.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub keyword_only: bool,
}

/// 1-based inclusive line range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionUnit {
    pub qualified_name: String,
    pub simple_name: String,
    pub file: String,
    pub params: Vec<Parameter>,
    /// Decorators plus the `def ...:` header, dedented to the definition's column.
    pub signature_text: String,
    pub body_text: String,
    pub body_span: LineSpan,
    /// Lines of the whole definition including decorators.
    pub def_span: LineSpan,
    /// Byte range in the file: from the start of the first decorator/`def`
    /// line to the end of the body.
    pub byte_range: (usize, usize),
    /// Start byte of the `function_definition` node itself.
    pub node_start: usize,
    pub docstring: Option<String>,
    pub is_method: bool,
    pub is_nested: bool,
    pub is_async: bool,
    pub is_generator: bool,
    pub is_staticmethod: bool,
}

impl FunctionUnit {
    /// Nested functions cannot be called from outside their enclosing scope.
    pub fn retrievable(&self) -> bool {
        !self.is_nested
    }
}

impl Repository {
    pub fn file(&self, path: &str) -> Option<&SourceFile> {
        self.files.binary_search_by(|f| f.path.as_str().cmp(path)).ok().map(|i| &self.files[i])
    }

    pub fn function(&self, qualified_name: &str) -> Option<&FunctionUnit> {
        self.functions.get(qualified_name)
    }

    /// The definition's full source (decorators, header, body), dedented.
    pub fn source_of(&self, f: &FunctionUnit) -> String {
        let file = self.file(&f.file).expect("function file is indexed");
        pyast::dedent(&file.text[f.byte_range.0..f.byte_range.1])
    }

    pub fn simple_names(&self) -> BTreeSet<&str> {
        self.functions.values().map(|f| f.simple_name.as_str()).collect()
    }

    /// Functions sorted by file path then position.
    pub fn functions_in_source_order(&self) -> Vec<&FunctionUnit> {
        let mut fs: Vec<_> = self.functions.values().collect();
        fs.sort_by(|a, b| (&a.file, a.node_start).cmp(&(&b.file, b.node_start)));
        fs
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("repository serializes")
    }
}

/// Strips a `#k` disambiguation suffix.
pub fn base_name(qualified_or_simple: &str) -> &str {
    qualified_or_simple.split('#').next().unwrap_or(qualified_or_simple)
}

pub fn module_name(rel_path: &str) -> String {
    let stem = rel_path.strip_suffix(".py").unwrap_or(rel_path);
    let stem = stem.strip_suffix("/__init__").unwrap_or(stem);
    stem.replace('/', ".")
}

fn build_globs(patterns: &[String]) -> Result<GlobSet, IndexError> {
    let mut builder = GlobSetBuilder::new();
    let defaults = [DEFAULT_INCLUDE.to_string()];
    let patterns = if patterns.is_empty() { &defaults[..] } else { patterns };
    for p in patterns {
        let glob = Glob::new(p).map_err(|source| IndexError::BadGlob { pattern: p.clone(), source })?;
        builder.add(glob);
    }
    builder.build().map_err(|source| IndexError::BadGlob { pattern: patterns.join(","), source })
}

/// Indexes every matched Python file under `root`. Files that fail to parse
/// are kept with `parse_ok = false` and contribute no functions.
pub fn index_repository(root: &Path, include_globs: &[String]) -> Result<Repository, IndexError> {
    if !root.is_dir() {
        return Err(IndexError::MissingRoot(root.to_path_buf()));
    }
    let globs = build_globs(include_globs)?;
    let mut paths = Vec::new();
    for entry in WalkDir::new(root).follow_links(false).into_iter().filter_entry(|e| {
        e.depth() == 0 || !e.file_name().to_str().is_some_and(|n| n.starts_with('.'))
    }) {
        let entry = entry.map_err(|source| IndexError::Walk { path: root.to_path_buf(), source })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walkdir yields children of root");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if globs.is_match(&rel) {
            paths.push((rel, entry.path().to_path_buf()));
        }
    }
    paths.sort();

    let parsed: Vec<(SourceFile, Vec<FunctionUnit>, Option<String>)> =
        paths.par_iter().map(|(rel, abs)| index_file(rel, abs)).collect();

    let mut files = Vec::with_capacity(parsed.len());
    let mut all_functions = Vec::new();
    let mut warnings = Vec::new();
    for (file, functions, warning) in parsed {
        if let Some(w) = warning {
            log::warn!("{w}");
            warnings.push(w);
        }
        files.push(file);
        all_functions.extend(functions);
    }
    Ok(Repository { root_path: root.to_path_buf(), files, functions: disambiguate(all_functions), warnings })
}

/// Builds a repository from in-memory `(path, text)` pairs.
pub fn index_sources<'a>(root: &Path, sources: impl IntoIterator<Item = (&'a str, &'a str)>) -> Repository {
    let mut sources: Vec<_> = sources.into_iter().collect();
    sources.sort();
    let mut files = Vec::new();
    let mut functions = Vec::new();
    let mut warnings = Vec::new();
    for (path, text) in sources {
        let (file, fs, warning) = index_text(path, text.to_string());
        warnings.extend(warning);
        files.push(file);
        functions.extend(fs);
    }
    Repository { root_path: root.to_path_buf(), files, functions: disambiguate(functions), warnings }
}

fn index_file(rel: &str, abs: &Path) -> (SourceFile, Vec<FunctionUnit>, Option<String>) {
    match std::fs::read(abs) {
        Ok(bytes) => match String::from_utf8(bytes) {
            Ok(text) => index_text(rel, text),
            Err(e) => {
                let text = String::from_utf8_lossy(e.as_bytes()).into_owned();
                let file = SourceFile { path: rel.to_string(), text, imports: Vec::new(), parse_ok: false };
                (file, Vec::new(), Some(format!("{rel}: not valid UTF-8, skipped")))
            }
        },
        Err(e) => {
            let file = SourceFile { path: rel.to_string(), text: String::new(), imports: Vec::new(), parse_ok: false };
            (file, Vec::new(), Some(format!("{rel}: unreadable ({e}), skipped")))
        }
    }
}

fn index_text(rel: &str, text: String) -> (SourceFile, Vec<FunctionUnit>, Option<String>) {
    let tree = pyast::parse(&text);
    let root = tree.root_node();
    if root.has_error() {
        let line = first_error_line(root).map_or(String::new(), |l| format!(" near line {l}"));
        let file = SourceFile { path: rel.to_string(), text, imports: Vec::new(), parse_ok: false };
        return (file, Vec::new(), Some(format!("{rel}: syntax error{line}, skipped")));
    }
    let imports = collect_imports(root, &text);
    let mut functions = Vec::new();
    let module = module_name(rel);
    let mut scope = Vec::new();
    collect_functions(root, &text, rel, &module, &mut scope, &mut functions);
    drop(tree);
    (SourceFile { path: rel.to_string(), text, imports, parse_ok: true }, functions, None)
}

fn first_error_line(root: Node<'_>) -> Option<usize> {
    let mut line = None;
    pyast::walk_all(root, |n| {
        if line.is_none() && (n.is_error() || n.is_missing()) {
            line = Some(n.start_position().row + 1);
        }
    });
    line
}

fn is_import(kind: &str) -> bool {
    matches!(kind, "import_statement" | "import_from_statement" | "future_import_statement")
}

/// Module-level imports in source order, including those guarded by
/// top-level `if`/`try` blocks.
fn collect_imports(root: Node<'_>, src: &str) -> Vec<String> {
    let mut imports = Vec::new();
    fn visit(node: Node<'_>, src: &str, out: &mut Vec<String>) {
        for child in pyast::named_children(node) {
            let kind = child.kind();
            if is_import(kind) {
                out.push(text(child, src).to_string());
            } else if matches!(
                kind,
                "if_statement" | "try_statement" | "block" | "else_clause" | "elif_clause" | "except_clause"
                    | "finally_clause"
            ) {
                visit(child, src, out);
            }
        }
    }
    visit(root, src, &mut imports);
    imports
}

#[derive(Clone, Copy, PartialEq)]
enum ScopeKind {
    Class,
    Function,
}

fn collect_functions(
    node: Node<'_>,
    src: &str,
    rel: &str,
    module: &str,
    scope: &mut Vec<(String, ScopeKind)>,
    out: &mut Vec<FunctionUnit>,
) {
    for child in pyast::named_children(node) {
        let (def, outer) = match child.kind() {
            "decorated_definition" => match child.child_by_field_name("definition") {
                Some(d) => (d, child),
                None => continue,
            },
            _ => (child, child),
        };
        match def.kind() {
            "function_definition" => {
                let unit = function_unit(def, outer, src, rel, module, scope);
                let name = unit.simple_name.clone();
                out.push(unit);
                if let Some(body) = def.child_by_field_name("body") {
                    scope.push((name, ScopeKind::Function));
                    collect_functions(body, src, rel, module, scope, out);
                    scope.pop();
                }
            }
            "class_definition" => {
                let name = def.child_by_field_name("name").map_or("", |n| text(n, src)).to_string();
                if let Some(body) = def.child_by_field_name("body") {
                    scope.push((name, ScopeKind::Class));
                    collect_functions(body, src, rel, module, scope, out);
                    scope.pop();
                }
            }
            // Definitions inside if/try/with/for blocks still belong to the
            // current scope.
            _ => collect_functions(def, src, rel, module, scope, out),
        }
    }
}

fn function_unit(
    def: Node<'_>,
    outer: Node<'_>,
    src: &str,
    rel: &str,
    module: &str,
    scope: &[(String, ScopeKind)],
) -> FunctionUnit {
    let simple_name = def.child_by_field_name("name").map_or("", |n| text(n, src)).to_string();
    let mut qualified = String::from(module);
    for (name, _) in scope {
        if !qualified.is_empty() {
            qualified.push('.');
        }
        qualified.push_str(name);
    }
    if !qualified.is_empty() {
        qualified.push('.');
    }
    qualified.push_str(&simple_name);

    let body = def.child_by_field_name("body").expect("function_definition has a body");
    let start = pyast::line_start(src, outer.start_byte());
    let colon_end = pyast::children(def)
        .into_iter()
        .rev()
        .find(|c| c.kind() == ":")
        .map_or(body.start_byte(), |c| c.end_byte());
    let signature_text = pyast::dedent(&src[start..colon_end]);
    let body_text = pyast::block_text(body, src);

    let is_method = scope.last().is_some_and(|(_, k)| *k == ScopeKind::Class);
    let is_nested = scope.iter().any(|(_, k)| *k == ScopeKind::Function);
    let decorators: Vec<&str> = if outer.kind() == "decorated_definition" {
        pyast::named_children(outer).into_iter().filter(|c| c.kind() == "decorator").map(|c| text(c, src)).collect()
    } else {
        Vec::new()
    };
    let is_staticmethod = decorators.iter().any(|d| d.trim() == "@staticmethod");
    let is_async = pyast::children(def).iter().any(|c| c.kind() == "async");

    let mut is_generator = false;
    pyast::walk_scope(body, &mut |n| {
        if n.kind() == "yield" {
            is_generator = true;
        }
    });

    FunctionUnit {
        qualified_name: qualified,
        simple_name,
        file: rel.to_string(),
        params: def.child_by_field_name("parameters").map(|p| parameters(p, src)).unwrap_or_default(),
        signature_text,
        body_text,
        body_span: LineSpan { start: body.start_position().row + 1, end: body.end_position().row + 1 },
        def_span: LineSpan { start: outer.start_position().row + 1, end: def.end_position().row + 1 },
        byte_range: (start, def.end_byte()),
        node_start: def.start_byte(),
        docstring: docstring(body, src),
        is_method,
        is_nested,
        is_async,
        is_generator,
        is_staticmethod,
    }
}

fn docstring(body: Node<'_>, src: &str) -> Option<String> {
    let first = body.named_child(0)?;
    if first.kind() != "expression_statement" || first.named_child_count() != 1 {
        return None;
    }
    let string = first.named_child(0)?;
    if string.kind() != "string" {
        return None;
    }
    let content: String = pyast::named_children(string)
        .into_iter()
        .filter(|c| c.kind() == "string_content")
        .map(|c| text(c, src))
        .collect();
    Some(content)
}

/// Parameters of a `parameters` / `lambda_parameters` node.
pub fn parameters(node: Node<'_>, src: &str) -> Vec<Parameter> {
    let mut out = Vec::new();
    let mut keyword_only = false;
    for p in pyast::named_children(node) {
        let param = match p.kind() {
            "identifier" => Parameter { name: text(p, src).into(), kind: ParamKind::Positional, default: None, keyword_only },
            "typed_parameter" => {
                let inner = p.named_child(0).expect("typed_parameter has a name");
                match inner.kind() {
                    "list_splat_pattern" => {
                        keyword_only = true;
                        Parameter { name: splat_name(inner, src), kind: ParamKind::Varargs, default: None, keyword_only: false }
                    }
                    "dictionary_splat_pattern" => {
                        Parameter { name: splat_name(inner, src), kind: ParamKind::Kwargs, default: None, keyword_only: false }
                    }
                    _ => Parameter { name: text(inner, src).into(), kind: ParamKind::Positional, default: None, keyword_only },
                }
            }
            "default_parameter" | "typed_default_parameter" => Parameter {
                name: p.child_by_field_name("name").map_or("", |n| text(n, src)).into(),
                kind: ParamKind::KeywordWithDefault,
                default: p.child_by_field_name("value").map(|v| text(v, src).to_string()),
                keyword_only,
            },
            "list_splat_pattern" => {
                keyword_only = true;
                Parameter { name: splat_name(p, src), kind: ParamKind::Varargs, default: None, keyword_only: false }
            }
            "dictionary_splat_pattern" => {
                Parameter { name: splat_name(p, src), kind: ParamKind::Kwargs, default: None, keyword_only: false }
            }
            "keyword_separator" => {
                keyword_only = true;
                continue;
            }
            _ => continue,
        };
        out.push(param);
    }
    out
}

fn splat_name(node: Node<'_>, src: &str) -> String {
    node.named_child(0).map_or_else(String::new, |n| text(n, src).to_string())
}

/// Parses a `def name(...):` header (decorators allowed) into its name and
/// parameters.
pub fn parse_signature(signature: &str) -> Option<(String, Vec<Parameter>)> {
    let sig = pyast::dedent(signature.trim_end());
    let sig = sig.trim_end();
    let sig = if sig.ends_with(':') { sig.to_string() } else { format!("{sig}:") };
    let src = format!("{sig}\n    pass\n");
    let tree = pyast::parse(&src);
    let mut found = None;
    pyast::walk_all(tree.root_node(), |n| {
        if found.is_none() && n.kind() == "function_definition" {
            let name = n.child_by_field_name("name").map(|id| text(id, &src).to_string());
            let params = n.child_by_field_name("parameters").map(|p| parameters(p, &src)).unwrap_or_default();
            found = name.map(|name| (name, params));
        }
    });
    found
}

fn disambiguate(mut functions: Vec<FunctionUnit>) -> BTreeMap<String, FunctionUnit> {
    functions.sort_by(|a, b| (&a.file, a.node_start).cmp(&(&b.file, b.node_start)));
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for mut f in functions {
        let count = seen.entry(f.qualified_name.clone()).or_insert(0);
        *count += 1;
        if *count > 1 {
            f.qualified_name = format!("{}#{}", f.qualified_name, count);
        }
        out.insert(f.qualified_name.clone(), f);
    }
    out
}

/// Variable, function, attribute and call-target names in `code`. Code that
/// does not parse falls back to lexical identifier tokens.
pub fn extract_identifiers(code: &str) -> BTreeSet<String> {
    let dedented = pyast::dedent(code);
    let tree = pyast::parse(&dedented);
    let root = tree.root_node();
    let mut out = BTreeSet::new();
    if root.has_error() {
        for tok in lexer::tokenize(code) {
            if tok.kind == TokenKind::Name && !lexer::is_keyword(tok.text) {
                out.insert(tok.text.to_string());
            }
        }
        return out;
    }
    pyast::walk_all(root, |n| {
        if n.kind() == "identifier" {
            out.insert(text(n, &dedented).to_string());
        }
    });
    out
}
