//! Strict bracketed API-call grammar.
//!
//! ```text
//! call   := '[' Name '(' params? ')' ']'
//! Name   := [A-Za-z_][A-Za-z0-9_]*
//! params := param (',' param)*
//! param  := Key '=' value
//! value  := single-quoted | double-quoted | unquoted run without , ) ' ] "
//! ```
//!
//! Whitespace is allowed around keys, `=`, values and commas. Quoted values
//! resolve the escapes `\'`, `\"` and `\\`; any other backslash is kept.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CallError {
    #[error("invalid API name {0:?}")]
    InvalidName(String),
    #[error("duplicate parameter key {0:?}")]
    DuplicateKey(String),
}

/// An API name plus its parameters in source order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawApiCall", into = "RawApiCall")]
pub struct ApiCall {
    name: String,
    params: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct RawApiCall {
    name: String,
    params: Vec<(String, String)>,
}

impl TryFrom<RawApiCall> for ApiCall {
    type Error = CallError;

    fn try_from(raw: RawApiCall) -> Result<Self, Self::Error> {
        ApiCall::new(raw.name, raw.params)
    }
}

impl From<ApiCall> for RawApiCall {
    fn from(call: ApiCall) -> Self {
        RawApiCall {
            name: call.name,
            params: call.params,
        }
    }
}

impl ApiCall {
    pub fn new<N, I, K, V>(name: N, params: I) -> Result<Self, CallError>
    where
        N: Into<String>,
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let name = name.into();
        if name.is_empty() || name.contains(['[', ']', '(', ')']) {
            return Err(CallError::InvalidName(name));
        }
        let mut out: Vec<(String, String)> = Vec::new();
        for (k, v) in params {
            let k = k.into();
            if out.iter().any(|(existing, _)| *existing == k) {
                return Err(CallError::DuplicateKey(k));
            }
            out.push((k, v.into()));
        }
        Ok(Self { name, params: out })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[(String, String)] {
        &self.params
    }
}

impl fmt::Display for ApiCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_call(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCall {
    pub call: ApiCall,
    /// Byte range of the bracketed call within the source text.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NoBracket,
    BadName,
    BadParamSyntax,
    UnterminatedString,
    EmptyOutput,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::NoBracket => "no_bracket",
            FailureReason::BadName => "bad_name",
            FailureReason::BadParamSyntax => "bad_param_syntax",
            FailureReason::UnterminatedString => "unterminated_string",
            FailureReason::EmptyOutput => "empty_output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: FailureReason,
    /// Byte offset where the scan gave up.
    pub offset: usize,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at byte {}", self.reason.as_str(), self.offset)
    }
}

/// Finds the first well-formed call in `text`.
///
/// Every `[` is tried as a call start, left to right. When none succeeds the
/// failure from the attempt that got furthest is returned (earliest on ties).
pub fn parse_first_call(text: &str) -> Result<ParsedCall, ParseFailure> {
    if text.trim().is_empty() {
        return Err(ParseFailure {
            reason: FailureReason::EmptyOutput,
            offset: 0,
        });
    }
    let mut best: Option<ParseFailure> = None;
    for (start, _) in text.match_indices('[') {
        match Scanner::new(text, start).call() {
            Ok(parsed) => return Ok(parsed),
            Err(fail) => {
                if best.is_none_or(|b| fail.offset > b.offset) {
                    best = Some(fail);
                }
            }
        }
    }
    Err(best.unwrap_or(ParseFailure {
        reason: FailureReason::NoBracket,
        offset: text.len(),
    }))
}

/// Parses every non-overlapping call in `text`, in order.
pub fn parse_all_calls(text: &str) -> Vec<ParsedCall> {
    let mut out = Vec::new();
    let mut from = 0;
    while from < text.len() {
        match parse_first_call(&text[from..]) {
            Ok(mut parsed) => {
                parsed.span = parsed.span.start + from..parsed.span.end + from;
                from = parsed.span.end;
                out.push(parsed);
            }
            Err(_) => break,
        }
    }
    out
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
    start: usize,
}

impl<'a> Scanner<'a> {
    fn new(src: &'a str, start: usize) -> Self {
        Self {
            src,
            pos: start,
            start,
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn eat(&mut self, want: char) -> bool {
        if self.peek() == Some(want) {
            self.pos += want.len_utf8();
            true
        } else {
            false
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn fail(&self, reason: FailureReason) -> ParseFailure {
        ParseFailure {
            reason,
            offset: self.pos,
        }
    }

    fn ident(&mut self) -> Option<&'a str> {
        let begin = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                self.bump();
            }
            _ => return None,
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            self.bump();
        }
        Some(&self.src[begin..self.pos])
    }

    fn call(mut self) -> Result<ParsedCall, ParseFailure> {
        if !self.eat('[') {
            return Err(self.fail(FailureReason::NoBracket));
        }
        let name = self
            .ident()
            .ok_or_else(|| self.fail(FailureReason::BadName))?;
        if !self.eat('(') {
            return Err(self.fail(FailureReason::BadName));
        }
        let mut params: Vec<(String, String)> = Vec::new();
        self.skip_ws();
        if !self.eat(')') {
            loop {
                self.skip_ws();
                let key_at = self.pos;
                let key = self
                    .ident()
                    .ok_or_else(|| self.fail(FailureReason::BadParamSyntax))?;
                if params.iter().any(|(k, _)| k == key) {
                    return Err(ParseFailure {
                        reason: FailureReason::BadParamSyntax,
                        offset: key_at,
                    });
                }
                self.skip_ws();
                if !self.eat('=') {
                    return Err(self.fail(FailureReason::BadParamSyntax));
                }
                self.skip_ws();
                let value = self.value()?;
                params.push((key.to_string(), value));
                self.skip_ws();
                if self.eat(',') {
                    continue;
                }
                if self.eat(')') {
                    break;
                }
                return Err(self.fail(FailureReason::BadParamSyntax));
            }
        }
        if !self.eat(']') {
            return Err(self.fail(FailureReason::BadParamSyntax));
        }
        let call = ApiCall {
            name: name.to_string(),
            params,
        };
        Ok(ParsedCall {
            call,
            span: self.start..self.pos,
        })
    }

    fn value(&mut self) -> Result<String, ParseFailure> {
        match self.peek() {
            Some(q @ ('\'' | '"')) => {
                let open = self.pos;
                self.bump();
                let mut out = String::new();
                loop {
                    match self.bump() {
                        None => {
                            return Err(ParseFailure {
                                reason: FailureReason::UnterminatedString,
                                offset: open,
                            })
                        }
                        Some('\\') => match self.peek() {
                            Some(e @ ('\'' | '"' | '\\')) => {
                                self.bump();
                                out.push(e);
                            }
                            _ => out.push('\\'),
                        },
                        Some(c) if c == q => return Ok(out),
                        Some(c) => out.push(c),
                    }
                }
            }
            _ => {
                let begin = self.pos;
                while matches!(self.peek(), Some(c) if !matches!(c, ',' | ')' | '\'' | ']' | '"')) {
                    self.bump();
                }
                let raw = self.src[begin..self.pos].trim();
                if raw.is_empty() {
                    return Err(self.fail(FailureReason::BadParamSyntax));
                }
                Ok(raw.to_string())
            }
        }
    }
}

/// Canonical parameter map used for exact matching.
pub type NormalizedParams = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("duplicate key {key:?} after normalization")]
pub struct NormalizeError {
    pub key: String,
}

/// Sorted, trimmed, unquoted parameter map.
pub fn normalize_params(call: &ApiCall) -> Result<NormalizedParams, NormalizeError> {
    let mut out = BTreeMap::new();
    for (k, v) in call.params() {
        let key = k.trim().to_string();
        let value = normalize_value(v);
        if out.insert(key.clone(), value).is_some() {
            return Err(NormalizeError { key });
        }
    }
    Ok(out)
}

pub fn normalize_value(raw: &str) -> String {
    let v = raw.trim();
    let quoted = v.len() >= 2
        && ((v.starts_with('\'') && v.ends_with('\'')) || (v.starts_with('"') && v.ends_with('"')));
    if !quoted {
        return v.to_string();
    }
    let inner = &v[1..v.len() - 1];
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(&e @ ('\'' | '"' | '\\')) = chars.peek() {
                chars.next();
                out.push(e);
                continue;
            }
        }
        out.push(c);
    }
    out.trim().to_string()
}

/// Renders `[Name(k='v', ...)]` with single-quoted, escaped values.
pub fn render_call(call: &ApiCall) -> String {
    let mut out = String::with_capacity(call.name.len() + 16 * call.params.len() + 4);
    out.push('[');
    out.push_str(&call.name);
    out.push('(');
    for (i, (k, v)) in call.params.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(k);
        out.push_str("='");
        for c in v.chars() {
            if c == '\'' || c == '\\' {
                out.push('\\');
            }
            out.push(c);
        }
        out.push('\'');
    }
    out.push_str(")]");
    out
}
