//! Thin helpers over the tree-sitter Python grammar: parsing, name-role
//! classification and indentation handling that leaves string literals alone.

use std::cell::RefCell;
use std::collections::BTreeSet;

use tree_sitter::{Node, Parser, Tree};

thread_local! {
    static PARSER: RefCell<Parser> = RefCell::new({
        let mut parser = Parser::new();
        parser
            .set_language(&tree_sitter_python::LANGUAGE.into())
            .expect("tree-sitter-python grammar is ABI compatible");
        parser
    });
}

pub fn parse(src: &str) -> Tree {
    PARSER.with(|p| p.borrow_mut().parse(src, None)).expect("parser has a language and no timeout")
}

/// True when `src` is a syntactically valid Python module.
pub fn parses_cleanly(src: &str) -> bool {
    !parse(src).root_node().has_error()
}

pub fn text<'a>(node: Node<'_>, src: &'a str) -> &'a str {
    &src[node.byte_range()]
}

pub fn children<'t>(node: Node<'t>) -> Vec<Node<'t>> {
    let mut cursor = node.walk();
    node.children(&mut cursor).collect()
}

pub fn named_children<'t>(node: Node<'t>) -> Vec<Node<'t>> {
    let mut cursor = node.walk();
    node.named_children(&mut cursor).collect()
}

/// Pre-order traversal of every node under (and including) `root`.
pub fn walk_all<'t>(root: Node<'t>, mut visit: impl FnMut(Node<'t>)) {
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        visit(node);
        let mut kids = children(node);
        kids.reverse();
        stack.extend(kids);
    }
}

pub fn is_function_scope(kind: &str) -> bool {
    matches!(kind, "function_definition" | "lambda")
}

pub fn is_comprehension(kind: &str) -> bool {
    matches!(
        kind,
        "list_comprehension" | "set_comprehension" | "dictionary_comprehension" | "generator_expression"
    )
}

/// How an `identifier` node relates to the variable it spells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NameRole {
    Read,
    /// Plain rebinding: assignment target, loop target, `as` target, walrus.
    Store,
    /// Augmented assignment target (reads, then rebinds).
    AugStore,
    /// `def`/`class`/`import` introduce the name.
    Define,
    /// `global`/`nonlocal` declaration.
    Declare,
    /// A parameter of a nested function or lambda.
    Parameter,
    /// Not a variable at all (attribute name, keyword-argument name, module path).
    NotAName,
}

pub fn name_role(node: Node<'_>) -> NameRole {
    let Some(parent) = node.parent() else {
        return NameRole::Read;
    };
    let field = field_of(parent, node);
    match parent.kind() {
        "attribute" if field == Some("attribute") => return NameRole::NotAName,
        "keyword_argument" if field == Some("name") => return NameRole::NotAName,
        "function_definition" | "class_definition" if field == Some("name") => return NameRole::Define,
        "global_statement" | "nonlocal_statement" => return NameRole::Declare,
        "parameters" | "lambda_parameters" => return NameRole::Parameter,
        "default_parameter" | "typed_default_parameter" if field == Some("name") => {
            return NameRole::Parameter
        }
        "typed_parameter" if parent.named_child(0) == Some(node) => return NameRole::Parameter,
        "list_splat_pattern" | "dictionary_splat_pattern"
            if parent.parent().is_some_and(|g| matches!(g.kind(), "parameters" | "lambda_parameters" | "typed_parameter")) =>
        {
            return NameRole::Parameter
        }
        "dotted_name" => return import_role(parent, node),
        "aliased_import" => {
            return if field == Some("alias") { NameRole::Define } else { NameRole::NotAName };
        }
        "keyword_pattern" | "class_pattern" => return NameRole::NotAName,
        _ => {}
    }
    target_role(node)
}

fn import_role(dotted: Node<'_>, node: Node<'_>) -> NameRole {
    let Some(stmt) = dotted.parent() else {
        return NameRole::NotAName;
    };
    let first = dotted.named_child(0) == Some(node);
    match stmt.kind() {
        "import_statement" if first => NameRole::Define,
        "import_from_statement" if field_of(stmt, dotted) == Some("name") => NameRole::Define,
        _ => NameRole::NotAName,
    }
}

/// Walks up through destructuring patterns to see whether `node` is a target.
fn target_role(node: Node<'_>) -> NameRole {
    let mut child = node;
    while let Some(parent) = child.parent() {
        let field = field_of(parent, child);
        match parent.kind() {
            "pattern_list" | "tuple_pattern" | "list_pattern" | "list_splat_pattern" | "parenthesized_expression"
            | "tuple" | "list" => {
                child = parent;
            }
            "assignment" if field == Some("left") => return NameRole::Store,
            "augmented_assignment" if field == Some("left") => return NameRole::AugStore,
            "for_statement" | "for_in_clause" if field == Some("left") => return NameRole::Store,
            "named_expression" if field == Some("name") => return NameRole::Store,
            "as_pattern_target" => return NameRole::Store,
            "delete_statement" => return NameRole::Store,
            _ => return NameRole::Read,
        }
    }
    NameRole::Read
}

pub fn field_of(parent: Node<'_>, child: Node<'_>) -> Option<&'static str> {
    let mut cursor = parent.walk();
    for (i, c) in parent.children(&mut cursor).enumerate() {
        if c.id() == child.id() {
            return parent.field_name_for_child(i as u32);
        }
    }
    None
}

/// Names a nested function or lambda binds for its own body: parameters plus
/// (for `def`) anything assigned in the body that is not declared `nonlocal`/`global`.
pub fn scope_binds(scope: Node<'_>, src: &str, name: &str) -> bool {
    if let Some(params) = scope.child_by_field_name("parameters") {
        let mut found = false;
        walk_all(params, |n| {
            if n.kind() == "identifier" && text(n, src) == name && name_role(n) == NameRole::Parameter {
                found = true;
            }
        });
        if found {
            return true;
        }
    }
    if scope.kind() == "function_definition" {
        if let Some(body) = scope.child_by_field_name("body") {
            let locals = bound_names(body, src);
            return locals.contains(name);
        }
    }
    false
}

fn comprehension_binds(comp: Node<'_>, src: &str, name: &str) -> bool {
    named_children(comp).into_iter().filter(|c| c.kind() == "for_in_clause").any(|clause| {
        let mut found = false;
        if let Some(left) = clause.child_by_field_name("left") {
            walk_all(left, |n| {
                if n.kind() == "identifier" && text(n, src) == name {
                    found = true;
                }
            });
        }
        found
    })
}

/// Every identifier node under `root` that refers to the variable `name` in
/// the scope of `root`, in document order. Nested functions, lambdas and
/// comprehensions that rebind `name` are skipped.
pub fn name_occurrences<'t>(root: Node<'t>, src: &str, name: &str) -> Vec<(Node<'t>, NameRole)> {
    let mut out = Vec::new();
    collect_occurrences(root, src, name, &mut out);
    out
}

fn collect_occurrences<'t>(node: Node<'t>, src: &str, name: &str, out: &mut Vec<(Node<'t>, NameRole)>) {
    let kind = node.kind();
    if kind == "identifier" {
        if text(node, src) == name {
            match name_role(node) {
                NameRole::NotAName | NameRole::Parameter => {}
                role => out.push((node, role)),
            }
        }
        return;
    }
    if is_function_scope(kind) {
        if kind == "function_definition" {
            // Name, decorators (on the parent), defaults and annotations live
            // in the enclosing scope.
            if let Some(n) = node.child_by_field_name("name") {
                collect_occurrences(n, src, name, out);
            }
            if let Some(params) = node.child_by_field_name("parameters") {
                for p in named_children(params) {
                    for field in ["value", "type"] {
                        if let Some(v) = p.child_by_field_name(field) {
                            collect_occurrences(v, src, name, out);
                        }
                    }
                }
            }
            if let Some(r) = node.child_by_field_name("return_type") {
                collect_occurrences(r, src, name, out);
            }
        }
        if scope_binds(node, src, name) {
            return;
        }
        if let Some(body) = node.child_by_field_name("body") {
            collect_occurrences(body, src, name, out);
        }
        return;
    }
    if is_comprehension(kind) && comprehension_binds(node, src, name) {
        return;
    }
    for child in children(node) {
        collect_occurrences(child, src, name, out);
    }
}

/// Names bound in the scope rooted at `body` (a function body or a module).
pub fn bound_names(body: Node<'_>, src: &str) -> BTreeSet<String> {
    let mut bound = BTreeSet::new();
    let mut declared = BTreeSet::new();
    collect_bound(body, src, &mut bound, &mut declared);
    bound.retain(|n| !declared.contains(n));
    bound
}

fn collect_bound(node: Node<'_>, src: &str, bound: &mut BTreeSet<String>, declared: &mut BTreeSet<String>) {
    let kind = node.kind();
    if kind == "identifier" {
        match name_role(node) {
            NameRole::Store | NameRole::AugStore | NameRole::Define => {
                bound.insert(text(node, src).to_string());
            }
            NameRole::Declare => {
                declared.insert(text(node, src).to_string());
            }
            _ => {}
        }
        return;
    }
    if kind == "function_definition" || kind == "class_definition" {
        if let Some(n) = node.child_by_field_name("name") {
            bound.insert(text(n, src).to_string());
        }
        return;
    }
    if kind == "lambda" {
        return;
    }
    if is_comprehension(kind) {
        // Only walrus targets escape a comprehension.
        walk_all(node, |n| {
            if n.kind() == "named_expression" {
                if let Some(name) = n.child_by_field_name("name") {
                    bound.insert(text(name, src).to_string());
                }
            }
        });
        return;
    }
    for child in children(node) {
        collect_bound(child, src, bound, declared);
    }
}

/// Visits nodes that belong to the scope rooted at `root`, not descending
/// into nested `def`/`class`/`lambda` bodies.
pub fn walk_scope<'t>(root: Node<'t>, visit: &mut impl FnMut(Node<'t>)) {
    visit(root);
    for child in children(root) {
        match child.kind() {
            "function_definition" | "class_definition" | "lambda" => visit(child),
            _ => walk_scope(child, visit),
        }
    }
}

/// 0-based indices of lines that begin inside a multi-line string literal.
/// Their leading whitespace is string content and must not be touched.
pub fn string_interior_lines(tree: &Tree, line_offset: usize) -> BTreeSet<usize> {
    let mut lines = BTreeSet::new();
    walk_all(tree.root_node(), |n| {
        if n.kind() == "string" {
            let (s, e) = (n.start_position().row, n.end_position().row);
            for row in s + 1..=e {
                if row >= line_offset {
                    lines.insert(row - line_offset);
                }
            }
        }
    });
    lines
}

fn leading_ws(line: &str) -> &str {
    &line[..line.len() - line.trim_start_matches([' ', '\t']).len()]
}

/// Parses `text` even when its first line is indented, returning the tree and
/// how many synthetic lines were prepended.
fn parse_indented(text: &str) -> (Tree, usize) {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if leading_ws(first).is_empty() {
        (parse(text), 0)
    } else {
        (parse(&format!("if True:\n{text}")), 1)
    }
}

pub fn interior_lines_of(text: &str) -> BTreeSet<usize> {
    let (tree, offset) = parse_indented(text);
    string_interior_lines(&tree, offset)
}

/// Removes the whitespace prefix common to every code line (like Python's
/// `textwrap.dedent`) without editing lines inside multi-line strings.
pub fn dedent(text: &str) -> String {
    let interior = interior_lines_of(text);
    let mut common: Option<&str> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || interior.contains(&i) {
            continue;
        }
        let ws = leading_ws(line);
        common = Some(match common {
            None => ws,
            Some(c) => {
                let n = c.bytes().zip(ws.bytes()).take_while(|(a, b)| a == b).count();
                &c[..n]
            }
        });
    }
    let prefix = common.unwrap_or("");
    if prefix.is_empty() {
        return text.to_string();
    }
    map_code_lines(text, &interior, |line| {
        if line.trim().is_empty() {
            line.trim_start_matches([' ', '\t']).to_string()
        } else {
            line.strip_prefix(prefix).unwrap_or(line).to_string()
        }
    })
}

/// Prefixes every non-blank code line with `indent`. When `skip_first` is set
/// the first line is left as is (it continues an already-indented line).
pub fn indent(text: &str, indent: &str, skip_first: bool) -> String {
    let interior = interior_lines_of(text);
    let mut first = skip_first;
    map_code_lines(text, &interior, |line| {
        if std::mem::take(&mut first) || line.trim().is_empty() {
            line.to_string()
        } else {
            format!("{indent}{line}")
        }
    })
}

fn map_code_lines(text: &str, interior: &BTreeSet<usize>, mut f: impl FnMut(&str) -> String) -> String {
    let mut out = String::with_capacity(text.len() + 16);
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if interior.contains(&i) {
            out.push_str(line);
        } else {
            out.push_str(&f(line));
        }
    }
    out
}

/// Given generated code that may be a whole `def name(...)` (possibly with
/// imports or decorators around it) or just a body, returns the body, dedented.
pub fn function_body_of(code: &str, name: &str) -> String {
    let code = dedent(code);
    let tree = parse(&code);
    let mut body = None;
    walk_all(tree.root_node(), |n| {
        if body.is_none()
            && n.kind() == "function_definition"
            && n.child_by_field_name("name").is_some_and(|id| text(id, &code) == name)
        {
            body = n.child_by_field_name("body");
        }
    });
    match body {
        Some(b) => dedent(&block_text(b, &code)),
        None => code.trim_matches('\n').to_string(),
    }
}

/// Verbatim text of a block: whole lines when the block starts on its own line,
/// otherwise just the inline suite (`def f(): return 1`).
pub fn block_text(block: Node<'_>, src: &str) -> String {
    let start = block.start_byte();
    let line_start = src[..start].rfind('\n').map_or(0, |p| p + 1);
    let from = if src[line_start..start].trim().is_empty() { line_start } else { start };
    src[from..block.end_byte()].to_string()
}

/// Byte offset of the start of the line containing `offset`.
pub fn line_start(src: &str, offset: usize) -> usize {
    src[..offset].rfind('\n').map_or(0, |p| p + 1)
}

/// Byte offset of the end of the line containing `offset` (before the newline).
pub fn line_end(src: &str, offset: usize) -> usize {
    src[offset..].find('\n').map_or(src.len(), |p| offset + p)
}
