//! A small Python tokenizer.
//!
//! It never fails: unterminated strings run to the end of the line (or the
//! end of input for triple-quoted strings) and unknown characters become
//! single-character operator tokens. Comments and whitespace are skipped.
//! This is what BLEU counts n-grams over, and what the identifier and
//! call-name extractors fall back to when a snippet does not parse.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Name,
    Number,
    Str,
    Op,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    pub span: Range<usize>,
}

pub const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue",
    "def", "del", "elif", "else", "except", "finally", "for", "from", "global", "if", "import",
    "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try", "while",
    "with", "yield",
];

pub fn is_keyword(name: &str) -> bool {
    KEYWORDS.binary_search(&name).is_ok()
}

/// True for strings shaped like a Python identifier (keywords included).
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if is_name_start(c) => chars.all(is_name_continue),
        _ => false,
    }
}

fn is_name_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_name_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

const OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "**", "//", "<<", ">>", "<=", ">=", "==", "!=",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=",
];

pub fn tokenize(src: &str) -> Vec<Token<'_>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < src.len() {
        let c = src[i..].chars().next().unwrap();
        if c.is_whitespace() || c == '\\' {
            i += c.len_utf8();
            continue;
        }
        if c == '#' {
            i = src[i..].find('\n').map_or(src.len(), |p| i + p);
            continue;
        }
        let start = i;
        if let Some(end) = scan_string(src, i) {
            out.push(Token { kind: TokenKind::Str, text: &src[start..end], span: start..end });
            i = end;
            continue;
        }
        if is_name_start(c) {
            let end = src[i..]
                .char_indices()
                .find(|&(_, ch)| !is_name_continue(ch))
                .map_or(src.len(), |(p, _)| i + p);
            out.push(Token { kind: TokenKind::Name, text: &src[start..end], span: start..end });
            i = end;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let mut j = i + 1;
            while j < src.len() {
                let b = bytes[j];
                if b.is_ascii_alphanumeric() || b == b'_' || b == b'.' {
                    j += 1;
                } else if (b == b'+' || b == b'-') && matches!(bytes[j - 1], b'e' | b'E') {
                    j += 1;
                } else {
                    break;
                }
            }
            out.push(Token { kind: TokenKind::Number, text: &src[start..j], span: start..j });
            i = j;
            continue;
        }
        let len = OPERATORS
            .iter()
            .find(|op| src[i..].starts_with(*op))
            .map_or(c.len_utf8(), |op| op.len());
        out.push(Token { kind: TokenKind::Op, text: &src[start..start + len], span: start..start + len });
        i += len;
    }
    out
}

/// Returns the end offset of a string literal starting at `i`, if one does.
fn scan_string(src: &str, i: usize) -> Option<usize> {
    let bytes = src.as_bytes();
    let mut j = i;
    while j < src.len() && j - i < 2 && matches!(bytes[j], b'r' | b'R' | b'b' | b'B' | b'u' | b'U' | b'f' | b'F') {
        j += 1;
    }
    let quote = *bytes.get(j)?;
    if quote != b'"' && quote != b'\'' {
        return None;
    }
    // A bare name such as `rb` followed by something other than a quote is
    // handled by the caller as an identifier.
    let triple = bytes.get(j + 1) == Some(&quote) && bytes.get(j + 2) == Some(&quote);
    let mut k = if triple { j + 3 } else { j + 1 };
    while k < src.len() {
        let b = bytes[k];
        if b == b'\\' {
            k += 2;
            continue;
        }
        if !triple && b == b'\n' {
            return Some(k);
        }
        if b == quote {
            if !triple {
                return Some(k + 1);
            }
            if bytes.get(k + 1) == Some(&quote) && bytes.get(k + 2) == Some(&quote) {
                return Some(k + 3);
            }
        }
        k += 1;
    }
    Some(src.len())
}

/// Splits `text` into pieces that concatenate back to `text`: each piece is a
/// token with its preceding whitespace/comments attached, and any trailing
/// whitespace joins the last piece.
pub fn split_lossless(text: &str) -> Vec<&str> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return if text.is_empty() { Vec::new() } else { vec![text] };
    }
    let mut pieces = Vec::with_capacity(tokens.len());
    let mut prev = 0;
    for (idx, tok) in tokens.iter().enumerate() {
        let end = if idx + 1 == tokens.len() { text.len() } else { tok.span.end };
        pieces.push(&text[prev..end]);
        prev = end;
    }
    pieces
}
