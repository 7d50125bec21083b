//! Similarity metrics between a reference body and a generated one.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::lexer;
use crate::pyast::{self, text};
use crate::source::extract_identifiers;

/// Per-line trailing whitespace and blank edge lines are ignored unless `strict`.
pub fn exact_match_with(reference: &str, candidate: &str, strict: bool) -> bool {
    if strict {
        return reference == candidate;
    }
    normalize_for_em(reference) == normalize_for_em(candidate)
}

pub fn exact_match(reference: &str, candidate: &str) -> bool {
    exact_match_with(reference, candidate, false)
}

fn normalize_for_em(s: &str) -> Vec<&str> {
    let lines: Vec<&str> = s.lines().map(str::trim_end).collect();
    let start = lines.iter().position(|l| !l.is_empty()).unwrap_or(lines.len());
    let end = lines.iter().rposition(|l| !l.is_empty()).map_or(start, |i| i + 1);
    lines[start..end].to_vec()
}

/// Character-level Levenshtein distance with unit costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[..a.len() - suffix], &b[..b.len() - suffix]);
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0; short.len() + 1];
    for (i, lc) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lc != sc);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// `1 - lev / max(|a|, |b|)`, with two empty strings scoring 1.
pub fn edit_similarity(reference: &str, candidate: &str) -> f64 {
    let longest = reference.chars().count().max(candidate.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(reference, candidate) as f64 / longest as f64
}

fn code_tokens(s: &str) -> Vec<&str> {
    lexer::tokenize(s).into_iter().map(|t| t.text).collect()
}

/// Token BLEU over the code lexer's tokens.
///
/// The order is capped at the shorter sequence length so that very short
/// snippets can still reach 1. No unigram overlap scores 0; a higher order
/// with no matching n-gram uses `1 / (total + 1)` in place of zero.
pub fn bleu(reference: &str, candidate: &str, max_n: usize) -> f64 {
    bleu_tokens(&code_tokens(reference), &code_tokens(candidate), max_n)
}

pub fn bleu_tokens(reference: &[&str], candidate: &[&str], max_n: usize) -> f64 {
    match (reference.is_empty(), candidate.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let n_max = max_n.min(reference.len()).min(candidate.len()).max(1);
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let ref_counts = ngram_counts(reference, n);
        let cand_counts = ngram_counts(candidate, n);
        let total: usize = cand_counts.values().sum();
        let matched: usize =
            cand_counts.iter().map(|(g, c)| (*c).min(ref_counts.get(g).copied().unwrap_or(0))).sum();
        if matched == 0 && n == 1 {
            return 0.0;
        }
        let p = if matched == 0 { 1.0 / (total as f64 + 1.0) } else { matched as f64 / total as f64 };
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).exp().min(1.0);
    (bp * (log_sum / n_max as f64).exp()).clamp(0.0, 1.0)
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
    let mut out = BTreeMap::new();
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

/// F1 between identifier sets; both empty scores 1, one empty scores 0.
pub fn identifier_f1(reference: &str, candidate: &str) -> f64 {
    set_f1(&extract_identifiers(reference), &extract_identifiers(candidate))
}

pub fn set_f1<T: Ord>(reference: &BTreeSet<T>, candidate: &BTreeSet<T>) -> f64 {
    match (reference.is_empty(), candidate.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = reference.intersection(candidate).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let p = common / candidate.len() as f64;
    let r = common / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Last line that is neither blank nor a comment, trimmed. Empty if none.
pub fn last_line(body: &str) -> &str {
    body.lines().map(str::trim).rfind(|l| !l.is_empty() && !l.starts_with('#')).unwrap_or("")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LastLineScores {
    pub em: f64,
    pub bleu: f64,
    pub es: f64,
}

pub fn last_line_scores(reference: &str, candidate: &str) -> LastLineScores {
    let (r, c) = (last_line(reference), last_line(candidate));
    LastLineScores { em: f64::from(u8::from(exact_match(r, c))), bleu: bleu(r, c, 4), es: edit_similarity(r, c) }
}

/// How invocation collections are compared for Jaccard, F1 and coverage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallMatchMode {
    #[default]
    Set,
    Multiset,
}

impl std::str::FromStr for CallMatchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "set" => Ok(CallMatchMode::Set),
            "multiset" => Ok(CallMatchMode::Multiset),
            other => Err(format!("unknown call match mode `{other}` (expected set or multiset)")),
        }
    }
}

/// Every call expression in a body plus the names being called.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Invocations {
    /// Normalized call text to occurrence count.
    pub calls: BTreeMap<String, usize>,
    pub callee_names: BTreeSet<String>,
}

/// Call expressions are normalized by re-joining their lexer tokens with
/// single spaces, so `f(x,y)` and `f( x, y )` compare equal.
pub fn extract_invocations(body: &str) -> Invocations {
    let code = pyast::dedent(body);
    let tree = pyast::parse(&code);
    let mut out = Invocations::default();
    pyast::walk_all(tree.root_node(), |n| {
        if n.kind() != "call" {
            return;
        }
        let normalized = code_tokens(text(n, &code)).join(" ");
        *out.calls.entry(normalized).or_insert(0) += 1;
        if let Some(f) = n.child_by_field_name("function") {
            let name = match f.kind() {
                "identifier" => Some(f),
                "attribute" => f.child_by_field_name("attribute"),
                _ => None,
            };
            if let Some(name) = name {
                out.callee_names.insert(text(name, &code).to_string());
            }
        }
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallScores {
    pub em: f64,
    pub jaccard: f64,
    pub f1: f64,
    pub coverage: f64,
    pub dir: f64,
}

/// Compares the invocations of two bodies.
///
/// `repo_functions`, when given, restricts the reference callee names used for
/// DIR to functions defined in the repository. A reference with nothing to
/// recall gives coverage and DIR of 1.
pub fn call_statement_scores(
    reference: &str,
    candidate: &str,
    mode: CallMatchMode,
    repo_functions: Option<&BTreeSet<String>>,
) -> CallScores {
    let r = extract_invocations(reference);
    let c = extract_invocations(candidate);
    let em = f64::from(u8::from(r.calls == c.calls));
    let weight = |m: &BTreeMap<String, usize>, k: &str| match mode {
        CallMatchMode::Set => usize::from(m.contains_key(k)),
        CallMatchMode::Multiset => m.get(k).copied().unwrap_or(0),
    };
    let keys: BTreeSet<&str> = r.calls.keys().chain(c.calls.keys()).map(String::as_str).collect();
    let (mut inter, mut union, mut ref_total, mut cand_total) = (0usize, 0usize, 0usize, 0usize);
    for k in keys {
        let (a, b) = (weight(&r.calls, k), weight(&c.calls, k));
        inter += a.min(b);
        union += a.max(b);
        ref_total += a;
        cand_total += b;
    }
    let jaccard = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let f1 = match (ref_total, cand_total) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ if inter == 0 => 0.0,
        _ => 2.0 * inter as f64 / (ref_total + cand_total) as f64,
    };
    let coverage = if ref_total == 0 { 1.0 } else { inter as f64 / ref_total as f64 };
    let wanted: BTreeSet<&String> =
        r.callee_names.iter().filter(|n| repo_functions.is_none_or(|repo| repo.contains(*n))).collect();
    let dir = if wanted.is_empty() {
        1.0
    } else {
        wanted.iter().filter(|n| c.callee_names.contains(**n)).count() as f64 / wanted.len() as f64
    };
    CallScores { em, jaccard, f1, coverage, dir }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub em: f64,
    pub es: f64,
    pub bleu: f64,
    pub id_f1: f64,
}

/// ES is taken over the same normalized text as EM unless `strict_em` is set.
pub fn score_sample(reference: &str, candidate: &str, strict_em: bool) -> SampleScores {
    SampleScores {
        em: f64::from(u8::from(exact_match_with(reference, candidate, strict_em))),
        es: if strict_em {
            edit_similarity(reference, candidate)
        } else {
            edit_similarity(&normalize_for_em(reference).join("\n"), &normalize_for_em(candidate).join("\n"))
        },
        bleu: bleu(reference, candidate, 4),
        id_f1: identifier_f1(reference, candidate),
    }
}

/// Means over a set of samples, scaled to `[0, 100]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub em: f64,
    pub es: f64,
    pub bleu: f64,
    pub id_f1: f64,
}

impl ScoreReport {
    pub fn aggregate<'a>(samples: impl IntoIterator<Item = &'a SampleScores>) -> ScoreReport {
        let mut r = ScoreReport::default();
        for s in samples {
            r.n += 1;
            r.em += s.em;
            r.es += s.es;
            r.bleu += s.bleu;
            r.id_f1 += s.id_f1;
        }
        if r.n > 0 {
            let k = 100.0 / r.n as f64;
            r.em *= k;
            r.es *= k;
            r.bleu *= k;
            r.id_f1 *= k;
        }
        r
    }
}

/// One reference/candidate pair to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub task_id: String,
    pub reference: String,
    pub candidate: String,
    #[serde(default)]
    pub group: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub strict_em: bool,
    pub call_mode: CallMatchMode,
}

/// Means of the targeted analyses, scaled to `[0, 100]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetedReport {
    pub last_line_em: f64,
    pub last_line_bleu: f64,
    pub last_line_es: f64,
    pub call_em: f64,
    pub call_jaccard: f64,
    pub call_f1: f64,
    pub call_coverage: f64,
    pub call_dir: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: ScoreReport,
    pub groups: BTreeMap<String, ScoreReport>,
    pub targeted: TargetedReport,
}

/// Scores every pair and aggregates overall and per group.
/// `repo_functions` restricts DIR as in [`call_statement_scores`].
pub fn evaluate(pairs: &[EvalPair], opts: EvalOptions, repo_functions: Option<&BTreeSet<String>>) -> EvalReport {
    let samples: Vec<SampleScores> = pairs.iter().map(|p| score_sample(&p.reference, &p.candidate, opts.strict_em)).collect();
    let mut grouped: BTreeMap<String, Vec<&SampleScores>> = BTreeMap::new();
    for (p, s) in pairs.iter().zip(&samples) {
        if let Some(g) = &p.group {
            grouped.entry(g.clone()).or_default().push(s);
        }
    }
    let mut t = TargetedReport::default();
    for p in pairs {
        let l = last_line_scores(&p.reference, &p.candidate);
        let c = call_statement_scores(&p.reference, &p.candidate, opts.call_mode, repo_functions);
        t.last_line_em += l.em;
        t.last_line_bleu += l.bleu;
        t.last_line_es += l.es;
        t.call_em += c.em;
        t.call_jaccard += c.jaccard;
        t.call_f1 += c.f1;
        t.call_coverage += c.coverage;
        t.call_dir += c.dir;
    }
    if !pairs.is_empty() {
        let k = 100.0 / pairs.len() as f64;
        for v in [
            &mut t.last_line_em,
            &mut t.last_line_bleu,
            &mut t.last_line_es,
            &mut t.call_em,
            &mut t.call_jaccard,
            &mut t.call_f1,
            &mut t.call_coverage,
            &mut t.call_dir,
        ] {
            *v *= k;
        }
    }
    EvalReport {
        overall: ScoreReport::aggregate(&samples),
        groups: grouped.into_iter().map(|(g, s)| (g, ScoreReport::aggregate(s))).collect(),
        targeted: t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("x", "x"));
        assert!(!exact_match("a=1", "a = 1"));
        assert!(exact_match("a=1\n", "a=1"));
        assert!(exact_match("\n\na=1   \nb\n\n", "a=1\nb"));
        assert!(!exact_match_with("a=1\n", "a=1", true));
    }

    #[test]
    fn edit_similarity_examples() {
        assert_eq!(edit_similarity("abc", "abc"), 1.0);
        assert!(close(edit_similarity("kitten", "sitting"), 1.0 - 3.0 / 7.0));
        assert_eq!(edit_similarity("", "ab"), 0.0);
        assert_eq!(edit_similarity("", ""), 1.0);
        assert_eq!(levenshtein("flaw", "lawn"), 2);
        assert_eq!(levenshtein("héllo", "hello"), 1);
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("return a + b", "return a + b", 4), 1.0);
        assert_eq!(bleu("x", "x", 4), 1.0);
        assert_eq!(bleu("a b c d", "e f g h", 4), 0.0);
        // unigrams match, no bigram does: p1 = 1, p2 = 1/(1+1)
        assert!(close(bleu("a b", "b a", 4), 0.5f64.sqrt()));
        // p = 4/8, 3/7, 2/6, 1/5 and BP = 1, from a separate n-gram counting script
        let got = bleu("a b c d", "a b c d e f g h", 4);
        assert!(close(got, 0.345720784641941), "{got}");
        assert_eq!(bleu("", "", 4), 1.0);
        assert_eq!(bleu("a", "", 4), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // candidate [a b] against [a b c d]: N = 2, p1 = p2 = 1, BP = e^{1 - 4/2}
        assert!(close(bleu("a b c d", "a b", 4), (-1.0f64).exp()));
    }

    #[test]
    fn identifier_f1_examples() {
        assert_eq!(identifier_f1("x = foo(y)", "x = foo(y)"), 1.0);
        assert!(close(identifier_f1("a + b", "b + c"), 0.5));
        assert_eq!(identifier_f1("a", "1"), 0.0);
        assert_eq!(identifier_f1("1", "2"), 1.0);
    }

    #[test]
    fn last_line_examples() {
        assert_eq!(last_line("x = 1\nreturn x\n# done\n\n"), "return x");
        let s = last_line_scores("a = 1\nreturn x", "return x");
        assert_eq!(s.em, 1.0);
        let s = last_line_scores("return result", "y = 2\nreturn results");
        assert_eq!(s.em, 0.0);
        assert!(s.es > 0.9);
        let s = last_line_scores("return x", "");
        assert_eq!((s.em, s.bleu, s.es), (0.0, 0.0, 0.0));
    }

    #[test]
    fn call_statement_examples() {
        let body = "y = f(x)\nreturn g(y)";
        let s = call_statement_scores(body, body, CallMatchMode::Set, None);
        assert_eq!((s.em, s.jaccard, s.f1, s.coverage, s.dir), (1.0, 1.0, 1.0, 1.0, 1.0));

        let s = call_statement_scores("f(x)\ng(y)", "f( x )", CallMatchMode::Set, None);
        assert_eq!(s.em, 0.0);
        assert!(close(s.coverage, 0.5) && close(s.jaccard, 0.5) && close(s.f1, 2.0 / 3.0));
        assert!(close(s.dir, 0.5));

        let s = call_statement_scores("f(x)\ng(y)", "return 1", CallMatchMode::Set, None);
        assert_eq!((s.em, s.jaccard, s.f1, s.coverage, s.dir), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn call_scores_multiset_and_repo_restriction() {
        let s = call_statement_scores("f(x)\nf(x)", "f(x)", CallMatchMode::Set, None);
        assert_eq!(s.em, 0.0);
        assert_eq!(s.jaccard, 1.0);
        let s = call_statement_scores("f(x)\nf(x)", "f(x)", CallMatchMode::Multiset, None);
        assert!(close(s.jaccard, 0.5) && close(s.coverage, 0.5));

        let repo: BTreeSet<String> = ["helper".to_string()].into();
        let s = call_statement_scores("print(helper(x))", "helper(x)", CallMatchMode::Set, Some(&repo));
        assert_eq!(s.dir, 1.0);
        let s = call_statement_scores("print(helper(x))", "helper(x)", CallMatchMode::Set, None);
        assert!(close(s.dir, 0.5));
        let s = call_statement_scores("self.load(p)", "obj.load(q)", CallMatchMode::Set, None);
        assert_eq!(s.dir, 1.0);
    }

    #[test]
    fn report_scales_to_percent() {
        let a = score_sample("return x", "return x", false);
        let b = SampleScores { em: 0.0, es: 0.5, bleu: 0.0, id_f1: 0.0 };
        let r = ScoreReport::aggregate([&a, &b]);
        assert_eq!(r.n, 2);
        assert!(close(r.em, 50.0) && close(r.es, 75.0) && close(r.bleu, 50.0) && close(r.id_f1, 50.0));
    }

    #[test]
    fn grouped_evaluation() {
        let pair = |id: &str, r: &str, c: &str, g: &str| EvalPair {
            task_id: id.into(),
            reference: r.into(),
            candidate: c.into(),
            group: Some(g.into()),
        };
        let pairs = [pair("a", "return f(x)", "return f(x)", "io"), pair("b", "return g(y)", "pass", "math")];
        let r = evaluate(&pairs, EvalOptions::default(), None);
        assert_eq!(r.overall.n, 2);
        assert!(close(r.overall.em, 50.0));
        assert!(close(r.groups["io"].em, 100.0) && close(r.groups["math"].em, 0.0));
        assert!(close(r.targeted.call_dir, 50.0));
        assert_eq!(evaluate(&[], EvalOptions::default(), None).overall.n, 0);
    }
}
