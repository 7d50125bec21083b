//! Embeds a (draft) function body into its callers at each call site.
//!
//! The expansion of one call is `normalize_returns(substitute_parameters(body))`:
//! formal parameters are replaced by the call's argument expressions, every
//! `return e` becomes `result = e`, the expanded block replaces the call
//! statement at the call's indentation, and an assignment `x = f(...)` is
//! redirected to `x = result`. Callee locals that collide with caller names
//! are renamed first so the expansion cannot capture caller variables.
//!
//! In [`InlineMode::Naive`] an early `return` becomes a plain assignment and
//! execution falls through, exactly like the rewrite rule it implements. The
//! output is prompt context, not code that will run. [`InlineMode::ControlFlowSafe`]
//! wraps the block in a single-iteration loop and follows each rewritten
//! return with a `break`, which preserves semantics for multi-return bodies.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use tree_sitter::Node;

use crate::callgraph::{callers_by_name, Binding, CallGraph, CallSite};
use crate::pyast::{self, text, NameRole};
use crate::source::{self, FunctionUnit, ParamKind, Parameter, Repository};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InlineError {
    #[error("arity mismatch: {0}")]
    ArityMismatch(String),
    #[error("unparseable: {0}")]
    Unparseable(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InlineMode {
    #[default]
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "cf-safe")]
    ControlFlowSafe,
}

impl std::str::FromStr for InlineMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Self::Naive),
            "cf-safe" | "control-flow-safe" => Ok(Self::ControlFlowSafe),
            other => Err(format!("unknown inline mode {other:?} (expected naive|cf-safe)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InlineOutcome {
    Inlined,
    /// The caller is included verbatim (prepend-only context).
    Fallback { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InlinedContext {
    pub caller: String,
    pub call_site: CallSite,
    /// Transformed caller source (dedented). For fallbacks, the raw caller.
    pub text: String,
    pub result_var: String,
    pub renamings: BTreeMap<String, String>,
    pub mode: InlineMode,
    pub outcome: InlineOutcome,
    /// The expanded block that replaced the call, before re-indentation.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub expanded_body: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl InlinedContext {
    pub fn is_inlined(&self) -> bool {
        self.outcome == InlineOutcome::Inlined
    }

    fn fallback(repo: &Repository, caller: &FunctionUnit, site: &CallSite, mode: InlineMode, reason: String) -> Self {
        InlinedContext {
            caller: caller.qualified_name.clone(),
            call_site: site.clone(),
            text: repo.source_of(caller),
            result_var: String::new(),
            renamings: BTreeMap::new(),
            mode,
            outcome: InlineOutcome::Fallback { reason },
            expanded_body: String::new(),
            diagnostics: Vec::new(),
        }
    }
}

/// What the inliner needs to know about the function being inlined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSpec {
    pub qualified_name: String,
    pub simple_name: String,
    pub params: Vec<Parameter>,
    pub is_method: bool,
    pub is_staticmethod: bool,
    pub is_async: bool,
}

impl TargetSpec {
    pub fn from_unit(f: &FunctionUnit) -> Self {
        TargetSpec {
            qualified_name: f.qualified_name.clone(),
            simple_name: f.simple_name.clone(),
            params: f.params.clone(),
            is_method: f.is_method,
            is_staticmethod: f.is_staticmethod,
            is_async: f.is_async,
        }
    }

    /// Builds a spec from a signature text. A first parameter named `self`
    /// or `cls` marks a method.
    pub fn from_signature(qualified_name: &str, signature: &str) -> Option<Self> {
        let (name, params) = source::parse_signature(signature)?;
        let is_method = params.first().is_some_and(|p| p.name == "self" || p.name == "cls");
        Some(TargetSpec {
            qualified_name: qualified_name.to_string(),
            simple_name: name,
            params,
            is_method,
            is_staticmethod: signature.contains("@staticmethod"),
            is_async: signature.trim_start().starts_with("async ") || signature.contains("\nasync "),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InlineOptions {
    /// Maximum number of distinct callers to expand into.
    pub budget: usize,
    pub mode: InlineMode,
}

impl Default for InlineOptions {
    fn default() -> Self {
        InlineOptions { budget: 5, mode: InlineMode::Naive }
    }
}

type Edit = (Range<usize>, String);

/// Applies non-overlapping edits. Insertions at the same offset keep the
/// order in which they were pushed.
fn apply_edits(src: &str, edits: Vec<Edit>) -> String {
    let mut edits: Vec<(usize, Edit)> = edits.into_iter().enumerate().collect();
    edits.sort_by(|(i, a), (j, b)| b.0.start.cmp(&a.0.start).then(b.0.end.cmp(&a.0.end)).then(j.cmp(i)));
    let mut out = src.to_string();
    for (_, (range, replacement)) in edits {
        out.replace_range(range, &replacement);
    }
    out
}

/// Returns `base` if unused, otherwise `base_1`, `base_2`, ...
pub fn fresh_name(base: &str, taken: &BTreeSet<String>) -> String {
    if !taken.contains(base) {
        return base.to_string();
    }
    (1..).map(|k| format!("{base}_{k}")).find(|n| !taken.contains(n)).expect("unbounded")
}

/// Maps call arguments onto formal parameters (positional, then keyword,
/// then defaults).
pub fn bind_arguments(
    params: &[Parameter],
    args: &[String],
    kwargs: &BTreeMap<String, String>,
) -> Result<Vec<(String, String)>, InlineError> {
    if let Some(p) = params.iter().find(|p| matches!(p.kind, ParamKind::Varargs | ParamKind::Kwargs)) {
        return Err(InlineError::Unsupported(format!("callee takes *args/**kwargs ({})", p.name)));
    }
    if args.iter().any(|a| a.starts_with('*')) || kwargs.keys().any(|k| k.starts_with("**")) {
        return Err(InlineError::Unsupported("call site unpacks *args/**kwargs".into()));
    }
    let mut bound: Vec<Option<String>> = vec![None; params.len()];
    let positional: Vec<usize> = (0..params.len()).filter(|&i| !params[i].keyword_only).collect();
    if args.len() > positional.len() {
        return Err(InlineError::ArityMismatch(format!(
            "{} positional arguments for {} positional parameters",
            args.len(),
            positional.len()
        )));
    }
    for (arg, &slot) in args.iter().zip(&positional) {
        bound[slot] = Some(arg.clone());
    }
    for (name, value) in kwargs {
        let slot = params
            .iter()
            .position(|p| &p.name == name)
            .ok_or_else(|| InlineError::ArityMismatch(format!("unexpected keyword argument {name:?}")))?;
        if bound[slot].is_some() {
            return Err(InlineError::ArityMismatch(format!("multiple values for {name:?}")));
        }
        bound[slot] = Some(value.clone());
    }
    params
        .iter()
        .zip(bound)
        .map(|(p, b)| match b.or_else(|| p.default.clone()) {
            Some(expr) => Ok((p.name.clone(), expr)),
            None => Err(InlineError::ArityMismatch(format!("missing argument for parameter {:?}", p.name))),
        })
        .collect()
}

const ATOMIC_KINDS: &[&str] = &[
    "identifier", "attribute", "call", "subscript", "string", "concatenated_string", "true", "false", "none",
    "list", "tuple", "dictionary", "set", "parenthesized_expression", "list_comprehension",
    "dictionary_comprehension", "set_comprehension", "generator_expression", "ellipsis", "integer", "float",
];

fn expression_kind(expr: &str) -> Option<String> {
    let tree = pyast::parse(expr.trim());
    let root = tree.root_node();
    if root.has_error() || root.named_child_count() != 1 {
        return None;
    }
    let stmt = root.named_child(0)?;
    if stmt.kind() != "expression_statement" || stmt.named_child_count() != 1 {
        return None;
    }
    Some(stmt.named_child(0)?.kind().to_string())
}

/// The text to splice in for a parameter occurrence.
fn substitution_text(expr: &str, occurrence: Node<'_>) -> String {
    let expr = expr.trim();
    let kind = expression_kind(expr);
    let atomic = kind.as_deref().is_some_and(|k| ATOMIC_KINDS.contains(&k));
    let numeric = matches!(kind.as_deref(), Some("integer" | "float"));
    let is_attr_object = occurrence.parent().is_some_and(|p| p.kind() == "attribute");
    if atomic && !(numeric && is_attr_object) {
        expr.to_string()
    } else {
        format!("({expr})")
    }
}

fn is_trivial_expression(expr: &str) -> bool {
    matches!(
        expression_kind(expr).as_deref(),
        Some("identifier" | "integer" | "float" | "string" | "true" | "false" | "none")
    )
}

/// How one parameter is realized in the expanded body.
#[derive(Debug, Clone, PartialEq, Eq)]
enum ParamPlan {
    /// Replace these read occurrences (byte ranges) with the argument expression.
    Substitute(Vec<Range<usize>>),
    /// Bind once with `p = arg` at the top and leave occurrences alone.
    ValueBind,
}

fn top_level_statement<'t>(root: Node<'t>, node: Node<'t>) -> Option<Node<'t>> {
    let mut current = node;
    while let Some(parent) = current.parent() {
        if parent.id() == root.id() {
            return Some(current);
        }
        current = parent;
    }
    None
}

/// True when some scope between `node` and `root` binds one of `names`:
/// substituting an expression mentioning them there would be captured.
fn captured_inside_nested_scope(root: Node<'_>, node: Node<'_>, src: &str, names: &BTreeSet<String>) -> bool {
    let mut current = node;
    while let Some(parent) = current.parent() {
        if parent.id() == root.id() {
            return false;
        }
        let kind = parent.kind();
        if pyast::is_function_scope(kind) && names.iter().any(|n| pyast::scope_binds(parent, src, n)) {
            return true;
        }
        if pyast::is_comprehension(kind) {
            let mut binds = false;
            for clause in pyast::named_children(parent).into_iter().filter(|c| c.kind() == "for_in_clause") {
                if let Some(left) = clause.child_by_field_name("left") {
                    pyast::walk_all(left, |n| binds |= n.kind() == "identifier" && names.contains(text(n, src)));
                }
            }
            if binds {
                return true;
            }
        }
        current = parent;
    }
    false
}

fn plan_parameter(root: Node<'_>, src: &str, param: &str, expr: &str) -> ParamPlan {
    let occurrences = pyast::name_occurrences(root, src, param);
    let expr_names = source::extract_identifiers(expr);
    let reads: Vec<Node<'_>> =
        occurrences.iter().filter(|(_, r)| *r == NameRole::Read).map(|(n, _)| *n).collect();
    if reads.iter().any(|n| captured_inside_nested_scope(root, *n, src, &expr_names)) {
        return ParamPlan::ValueBind;
    }
    let Some((first_store, role)) = occurrences.iter().find(|(_, r)| *r != NameRole::Read) else {
        return ParamPlan::Substitute(reads.iter().map(|n| n.byte_range()).collect());
    };
    // A rebinding stops substitution only when it is an unconditional
    // top-level assignment; otherwise the parameter keeps its argument value
    // on some paths and is bound once up front instead.
    let Some(stmt) = top_level_statement(root, *first_store) else {
        return ParamPlan::ValueBind;
    };
    let plain_assignment = *role == NameRole::Store
        && stmt.kind() == "expression_statement"
        && stmt.named_child(0).is_some_and(|a| {
            a.kind() == "assignment"
                && a.child_by_field_name("left").is_some_and(|l| {
                    l.start_byte() <= first_store.start_byte() && first_store.end_byte() <= l.end_byte()
                })
        });
    if !plain_assignment {
        return ParamPlan::ValueBind;
    }
    ParamPlan::Substitute(
        reads.iter().filter(|n| n.start_byte() < stmt.end_byte()).map(|n| n.byte_range()).collect(),
    )
}

/// Result of the parameter-substitution step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Substituted {
    pub text: String,
    /// Parameters bound once with an assignment instead of substituted.
    pub value_bound: Vec<String>,
    pub diagnostics: Vec<String>,
}

/// Replaces formal parameters by their bound argument expressions. The body
/// is dedented first. See [`bind_arguments`] for how arguments are matched.
pub fn substitute_parameters(
    body: &str,
    params: &[Parameter],
    args: &[String],
    kwargs: &BTreeMap<String, String>,
) -> Result<String, InlineError> {
    let bindings = bind_arguments(params, args, kwargs)?;
    Ok(substitute_bindings(body, &bindings)?.text)
}

pub fn substitute_bindings(body: &str, bindings: &[(String, String)]) -> Result<Substituted, InlineError> {
    let body = pyast::dedent(body);
    let tree = pyast::parse(&body);
    let root = tree.root_node();
    if root.has_error() {
        return Err(InlineError::Unparseable("callee body does not parse".into()));
    }
    let mut edits = Vec::new();
    let mut prelude = String::new();
    let mut value_bound = Vec::new();
    let mut diagnostics = Vec::new();
    for (param, expr) in bindings {
        match plan_parameter(root, &body, param, expr) {
            ParamPlan::Substitute(ranges) => {
                if param == expr.trim() {
                    continue;
                }
                if ranges.len() > 1 && !is_trivial_expression(expr) {
                    diagnostics.push(format!(
                        "argument `{}` substituted {} times for `{param}`",
                        expr.trim(),
                        ranges.len()
                    ));
                }
                for range in ranges {
                    let node = root.descendant_for_byte_range(range.start, range.end).expect("range from this tree");
                    edits.push((range, substitution_text(expr, node)));
                }
            }
            ParamPlan::ValueBind => {
                let expr = expr.trim();
                let rhs = if expr.contains('\n') && expression_kind(expr).is_none() { format!("({expr})") } else { expr.to_string() };
                prelude.push_str(&format!("{param} = {rhs}\n"));
                value_bound.push(param.clone());
            }
        }
    }
    let substituted = apply_edits(&body, edits);
    Ok(Substituted { text: format!("{prelude}{substituted}"), value_bound, diagnostics })
}

fn return_statements<'t>(root: Node<'t>) -> Vec<Node<'t>> {
    let mut out = Vec::new();
    pyast::walk_scope(root, &mut |n| {
        if n.kind() == "return_statement" {
            out.push(n);
        }
    });
    out
}

fn assigns_at_top_level(root: Node<'_>, src: &str, var: &str) -> bool {
    pyast::named_children(root).into_iter().any(|stmt| {
        stmt.kind() == "expression_statement"
            && stmt.named_child(0).is_some_and(|a| {
                a.kind() == "assignment" && a.child_by_field_name("left").is_some_and(|l| text(l, src) == var)
            })
    })
}

fn in_loop(root: Node<'_>, node: Node<'_>) -> bool {
    let mut current = node;
    while let Some(parent) = current.parent() {
        if parent.id() == root.id() {
            return false;
        }
        if matches!(parent.kind(), "for_statement" | "while_statement") {
            return true;
        }
        current = parent;
    }
    false
}

/// Rewrites `return e` to `result_var = e` and bare `return` to
/// `result_var = None` (naive mode). When no top-level statement assigns
/// `result_var` afterwards, `result_var = None` is appended (body without
/// returns) or prepended (returns only on some paths), mirroring Python's
/// implicit `None`.
pub fn normalize_returns(body: &str, result_var: &str) -> String {
    normalize_returns_with(body, result_var, InlineMode::Naive, "_inl_exit")
}

pub fn normalize_returns_with(body: &str, result_var: &str, mode: InlineMode, exit_flag: &str) -> String {
    let body = pyast::dedent(body);
    let tree = pyast::parse(&body);
    let root = tree.root_node();
    let returns = return_statements(root);
    let top: Vec<Node<'_>> = pyast::named_children(root).into_iter().filter(|n| n.kind() != "comment").collect();
    let last_is_return = top.last().is_some_and(|n| n.kind() == "return_statement");
    let only_trailing_return = returns.is_empty() || (returns.len() == 1 && last_is_return);

    let assignment = |ret: Node<'_>| -> (Range<usize>, String) {
        match ret.named_child(0) {
            Some(expr) => (ret.start_byte()..expr.start_byte(), format!("{result_var} = ")),
            None => (ret.byte_range(), format!("{result_var} = None")),
        }
    };

    if mode == InlineMode::Naive || only_trailing_return {
        let covered = top.iter().any(|n| n.kind() == "return_statement") || assigns_at_top_level(root, &body, result_var);
        let edits = returns.iter().map(|r| assignment(*r)).collect();
        let rewritten = apply_edits(&body, edits);
        if covered {
            return rewritten;
        }
        return if returns.is_empty() {
            format!("{}\n{result_var} = None", rewritten.trim_end_matches('\n'))
        } else {
            format!("{result_var} = None\n{rewritten}")
        };
    }

    let mut need_flag = false;
    let mut edits: Vec<Edit> = Vec::new();
    for ret in &returns {
        let (range, head) = assignment(*ret);
        if in_loop(root, *ret) {
            need_flag = true;
            edits.push((range, head));
            let end = ret.end_byte();
            edits.push((end..end, format!("; {exit_flag} = True; break")));
        } else {
            edits.push((range, head));
            let end = ret.end_byte();
            edits.push((end..end, "; break".to_string()));
        }
    }
    // After every loop containing a rewritten return, propagate the exit.
    let mut loops = Vec::new();
    pyast::walk_scope(root, &mut |n| {
        if matches!(n.kind(), "for_statement" | "while_statement")
            && returns.iter().any(|r| n.start_byte() <= r.start_byte() && r.end_byte() <= n.end_byte())
        {
            loops.push(n);
        }
    });
    // Loops ending on the same line share one insertion point; inner loops go first.
    let mut checks: BTreeMap<usize, Vec<(usize, String)>> = BTreeMap::new();
    for l in loops {
        let indent = &body[pyast::line_start(&body, l.start_byte())..l.start_byte()];
        let at = pyast::line_end(&body, l.end_byte());
        checks.entry(at).or_default().push((l.start_byte(), format!("\n{indent}if {exit_flag}: break")));
    }
    for (at, mut lines) in checks {
        lines.sort_by(|a, b| b.0.cmp(&a.0));
        edits.push((at..at, lines.into_iter().map(|(_, l)| l).collect()));
    }
    let rewritten = apply_edits(&body, edits);
    let mut out = format!("{result_var} = None\n");
    if need_flag {
        out.push_str(&format!("{exit_flag} = False\n"));
    }
    out.push_str("while True:\n");
    out.push_str(&pyast::indent(rewritten.trim_end_matches('\n'), "    ", false));
    out.push_str("\n    break");
    out
}

/// Renames callee-local names throughout the body (scope-aware).
pub fn rename_locals(body: &str, renamings: &BTreeMap<String, String>) -> String {
    let body = pyast::dedent(body);
    let tree = pyast::parse(&body);
    let root = tree.root_node();
    let mut edits = Vec::new();
    for (from, to) in renamings {
        for (node, _) in pyast::name_occurrences(root, &body, from) {
            edits.push((node.byte_range(), to.clone()));
        }
    }
    apply_edits(&body, edits)
}

/// Intermediate forms of one expansion, exposed for inspection and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expansion {
    pub renamings: BTreeMap<String, String>,
    pub renamed: String,
    pub substituted: Substituted,
    pub result_var: String,
    pub normalized: String,
}

/// Computes the expanded block for one call: capture-avoiding renaming,
/// then parameter substitution, then return normalization.
pub fn expand_body(
    body: &str,
    bindings: &[(String, String)],
    caller_names: &BTreeSet<String>,
    mode: InlineMode,
) -> Result<Expansion, InlineError> {
    let body = pyast::dedent(body);
    let tree = pyast::parse(&body);
    let root = tree.root_node();
    if root.has_error() {
        return Err(InlineError::Unparseable("callee body does not parse".into()));
    }
    let mut async_or_gen = None;
    pyast::walk_scope(root, &mut |n| match n.kind() {
        "yield" => async_or_gen = Some("generator"),
        "await" => async_or_gen = Some("coroutine"),
        _ => {}
    });
    if let Some(kind) = async_or_gen {
        return Err(InlineError::Unsupported(format!("callee body is a {kind}")));
    }

    let mut taken: BTreeSet<String> = caller_names.clone();
    for (_, expr) in bindings {
        taken.extend(source::extract_identifiers(expr));
    }
    let body_names = source::extract_identifiers(&body);

    let mut locals = pyast::bound_names(root, &body);
    for (param, expr) in bindings {
        if plan_parameter(root, &body, param, expr) == ParamPlan::ValueBind {
            locals.insert(param.clone());
        }
    }
    let mut all_names: BTreeSet<String> = taken.union(&body_names).cloned().collect();
    let mut renamings = BTreeMap::new();
    for local in locals.iter().filter(|l| taken.contains(*l)) {
        let new = (0..).map(|k| format!("{local}_inl{k}")).find(|n| !all_names.contains(n)).expect("unbounded");
        all_names.insert(new.clone());
        renamings.insert(local.clone(), new);
    }
    let renamed = rename_locals(&body, &renamings);
    let bindings: Vec<(String, String)> = bindings
        .iter()
        .map(|(p, e)| (renamings.get(p).cloned().unwrap_or_else(|| p.clone()), e.clone()))
        .collect();
    drop(tree);

    let substituted = substitute_bindings(&renamed, &bindings)?;
    let result_var = fresh_name("result", &all_names);
    all_names.insert(result_var.clone());
    let exit_flag = fresh_name("_inl_exit", &all_names);
    let normalized = normalize_returns_with(&substituted.text, &result_var, mode, &exit_flag);
    Ok(Expansion { renamings, renamed, substituted, result_var, normalized })
}

/// Expands `body` (the callee's implementation) at one call site inside `caller`.
pub fn inline_at_call_site(
    repo: &Repository,
    caller: &FunctionUnit,
    site: &CallSite,
    target: &TargetSpec,
    body: &str,
    mode: InlineMode,
) -> Result<InlinedContext, InlineError> {
    if site.caller == target.qualified_name {
        return Err(InlineError::Unsupported("self-recursive call site".into()));
    }
    if target.is_async {
        return Err(InlineError::Unsupported("async callee".into()));
    }
    let file = repo.file(&site.location.file).ok_or_else(|| InlineError::Unparseable("caller file not indexed".into()))?;
    let (base, end) = caller.byte_range;
    let within = |(s, e): (usize, usize)| base <= s && e <= end;
    if !within(site.call_span) || !within(site.statement_span) {
        return Err(InlineError::Unsupported("call site outside caller".into()));
    }

    let bindings = bind_with_receiver(target, site)?;
    let caller_src = &file.text[base..end];
    let caller_names = source::extract_identifiers(caller_src);
    let expansion = expand_body(body, &bindings, &caller_names, mode)?;

    let stmt = (site.statement_span.0 - base, site.statement_span.1 - base);
    let call = (site.call_span.0 - base, site.call_span.1 - base);
    let indent = &caller_src[pyast::line_start(caller_src, stmt.0)..stmt.0];
    if !indent.trim().is_empty() {
        return Err(InlineError::Unsupported("statement shares its line with other code".into()));
    }
    let block = pyast::indent(&expansion.normalized, indent, true);
    let rv = &expansion.result_var;
    let edits: Vec<Edit> = match &site.binding {
        Binding::ExpressionStatement => vec![(stmt.0..stmt.1, block)],
        Binding::Assignment { .. } => {
            let redirected = format!(
                "{}{rv}{}",
                &caller_src[stmt.0..call.0],
                &caller_src[call.1..stmt.1]
            );
            vec![(stmt.0..stmt.1, format!("{block}\n{indent}{redirected}"))]
        }
        Binding::Subexpression { .. } => {
            if let Some(reason) = &site.hoist_blocker {
                return Err(InlineError::Unsupported(format!("cannot hoist call: {reason}")));
            }
            let mut taken = caller_names.clone();
            taken.extend(source::extract_identifiers(&expansion.normalized));
            let tmp = (0..).map(|k| format!("_inl_res_{k}")).find(|n| !taken.contains(n)).expect("unbounded");
            vec![
                (stmt.0..stmt.0, format!("{block}\n{indent}{tmp} = {rv}\n{indent}")),
                (call.0..call.1, tmp),
            ]
        }
    };
    let edited = apply_edits(caller_src, edits);
    let text = pyast::dedent(&edited);
    if !pyast::parses_cleanly(&text) {
        return Err(InlineError::Unparseable("inlined caller does not re-parse".into()));
    }
    Ok(InlinedContext {
        caller: caller.qualified_name.clone(),
        call_site: site.clone(),
        text,
        result_var: expansion.result_var.clone(),
        renamings: expansion.renamings,
        mode,
        outcome: InlineOutcome::Inlined,
        expanded_body: expansion.normalized,
        diagnostics: expansion.substituted.diagnostics,
    })
}

/// Binds arguments, passing the receiver of an attribute call as the first
/// parameter of a method when the call site does not pass it explicitly.
fn bind_with_receiver(target: &TargetSpec, site: &CallSite) -> Result<Vec<(String, String)>, InlineError> {
    let plain = || bind_arguments(&target.params, &site.args, &site.keyword_args);
    match (&site.receiver, target.is_method && !target.is_staticmethod) {
        (Some(receiver), true) => {
            let mut args = Vec::with_capacity(site.args.len() + 1);
            args.push(receiver.clone());
            args.extend(site.args.iter().cloned());
            match bind_arguments(&target.params, &args, &site.keyword_args) {
                Ok(b) => Ok(b),
                Err(InlineError::ArityMismatch(_)) => plain(),
                Err(e) => Err(e),
            }
        }
        _ => plain(),
    }
}

/// Expands `draft_body` into up to `opts.budget` callers of the target
/// (shortest callers first, ties by path), one context per call site. Sites
/// that cannot be expanded degrade to the raw caller text.
/// Callers of `target` with their call sites, shortest caller first, at most
/// `budget` of them. Recursive calls inside the target itself are skipped.
pub fn select_callers<'r>(
    repo: &'r Repository,
    graph: &'r CallGraph,
    target: &TargetSpec,
    budget: usize,
) -> Vec<(&'r FunctionUnit, Vec<&'r CallSite>)> {
    let mut by_caller: BTreeMap<&str, (&FunctionUnit, Vec<&CallSite>)> = BTreeMap::new();
    for r in callers_by_name(repo, graph, &target.simple_name, &target.qualified_name) {
        if r.self_recursive {
            continue;
        }
        by_caller.entry(r.caller.qualified_name.as_str()).or_insert_with(|| (r.caller, Vec::new())).1.push(r.site);
    }
    let mut callers: Vec<_> = by_caller.into_values().collect();
    callers.sort_by(|(a, _), (b, _)| {
        let len = |f: &FunctionUnit| f.byte_range.1 - f.byte_range.0;
        (len(a), &a.file, a.node_start).cmp(&(len(b), &b.file, b.node_start))
    });
    callers.truncate(budget);
    callers
}

pub fn inline_draft_into_callers(
    repo: &Repository,
    graph: &CallGraph,
    target: &TargetSpec,
    draft_body: &str,
    opts: InlineOptions,
) -> Vec<InlinedContext> {
    let mut out = Vec::new();
    for (caller, sites) in select_callers(repo, graph, target, opts.budget) {
        for site in sites {
            let ctx = inline_at_call_site(repo, caller, site, target, draft_body, opts.mode).unwrap_or_else(|e| {
                log::info!("inline {} into {} at line {}: {e}", target.qualified_name, caller.qualified_name, site.location.line);
                InlinedContext::fallback(repo, caller, site, opts.mode, e.to_string())
            });
            out.push(ctx);
        }
    }
    out
}
