//! Schema-constrained extraction of typed values from free text.
//!
//! A [`Parser`] turns an [`ExtractionRequest`] into raw text. [`extract`]
//! validates that text against the request's [`ExpectedKind`], retries once,
//! then falls back to [`reference_parse`] before giving up. A raw response is
//! never coerced into a value it does not literally encode.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::digest::digest_parts;
use crate::text::{dedup_names, tokens};
use crate::trial::Field;

/// Version tag mixed into every request digest. Bump when the request
/// rendering or validation grammar changes, which invalidates replay fixtures.
pub const CONTRACT_VERSION: &str = "extract-v1";

/// Parser id recorded when the deterministic fallback produced the value.
pub const FALLBACK_PARSER_ID: &str = "reference-fallback";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedKind {
    BooleanYesNo,
    Number,
    PhraseOrNone,
    NameList,
}

impl ExpectedKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpectedKind::BooleanYesNo => "boolean_yes_no",
            ExpectedKind::Number => "number",
            ExpectedKind::PhraseOrNone => "phrase_or_none",
            ExpectedKind::NameList => "name_list",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionRequest {
    pub instruction: String,
    pub attended_text: String,
    pub expected_kind: ExpectedKind,
}

impl ExtractionRequest {
    pub fn new(instruction: &str, attended_text: &str, expected_kind: ExpectedKind) -> Self {
        ExtractionRequest {
            instruction: instruction.to_owned(),
            attended_text: attended_text.to_owned(),
            expected_kind,
        }
    }

    /// Stable key for replay fixtures.
    pub fn digest(&self) -> String {
        digest_parts(&[
            CONTRACT_VERSION,
            self.expected_kind.as_str(),
            &self.instruction,
            &self.attended_text,
        ])
    }
}

/// A validated value. The variant always agrees with the request kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Value {
    Flag(bool),
    Number(f64),
    /// `None` is the none-marker.
    Phrase(Option<String>),
    Names(Vec<String>),
}

impl Value {
    pub fn kind(&self) -> ExpectedKind {
        match self {
            Value::Flag(_) => ExpectedKind::BooleanYesNo,
            Value::Number(_) => ExpectedKind::Number,
            Value::Phrase(_) => ExpectedKind::PhraseOrNone,
            Value::Names(_) => ExpectedKind::NameList,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub parser_id: String,
    pub request_digest: String,
    /// Parser calls made, including the retry.
    pub attempts: u8,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractedValue {
    value: Value,
    raw: String,
    provenance: Provenance,
}

impl ExtractedValue {
    pub fn kind(&self) -> ExpectedKind {
        self.value.kind()
    }

    pub fn value(&self) -> &Value {
        &self.value
    }

    /// The raw response text the value was validated from.
    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
}

#[derive(Deserialize)]
struct ExtractedValueRepr {
    kind: Option<ExpectedKind>,
    value: Value,
    raw: String,
    provenance: Provenance,
}

impl<'de> Deserialize<'de> for ExtractedValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = ExtractedValueRepr::deserialize(d)?;
        let checked = validate_raw(repr.value.kind(), &repr.raw).map_err(serde::de::Error::custom)?;
        if checked != repr.value || repr.kind.is_some_and(|k| k != checked.kind()) {
            return Err(serde::de::Error::custom("value does not match its raw text"));
        }
        Ok(ExtractedValue {
            value: checked,
            raw: repr.raw,
            provenance: repr.provenance,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    SchemaViolation,
    ParserUnavailable,
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionFailure {
    pub reason: FailureReason,
    pub detail: String,
    pub request_digest: String,
}

impl fmt::Display for ExtractionFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reason = match self.reason {
            FailureReason::SchemaViolation => "schema violation",
            FailureReason::ParserUnavailable => "parser unavailable",
            FailureReason::EmptyInput => "empty input",
        };
        write!(f, "{reason}: {}", self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParserError {
    Unavailable(String),
}

impl fmt::Display for ParserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParserError::Unavailable(why) => write!(f, "parser unavailable: {why}"),
        }
    }
}

/// Turns a request into raw response text.
pub trait Parser: Send + Sync {
    fn id(&self) -> &str;
    fn parse(&self, request: &ExtractionRequest) -> Result<String, ParserError>;
}

impl<P: Parser + ?Sized> Parser for &P {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn parse(&self, request: &ExtractionRequest) -> Result<String, ParserError> {
        (**self).parse(request)
    }
}

impl<P: Parser + ?Sized> Parser for alloc::boxed::Box<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn parse(&self, request: &ExtractionRequest) -> Result<String, ParserError> {
        (**self).parse(request)
    }
}

impl<P: Parser + ?Sized> Parser for alloc::sync::Arc<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn parse(&self, request: &ExtractionRequest) -> Result<String, ParserError> {
        (**self).parse(request)
    }
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for q in ['"', '\'', '`'] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return s[1..s.len() - 1].trim();
        }
    }
    s
}

fn is_decimal_literal(s: &str) -> bool {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    match frac {
        None => !int.is_empty() && digits(int),
        Some(f) => digits(int) && digits(f) && !(int.is_empty() && f.is_empty()),
    }
}

fn split_list_items(inner: &str) -> Result<Vec<String>, String> {
    let mut items = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    for c in inner.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => current.push(c),
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == ',' => items.push(core::mem::take(&mut current)),
            None => current.push(c),
        }
    }
    if quote.is_some() {
        return Err("unterminated quote in list".into());
    }
    items.push(current);
    Ok(items)
}

/// Checks raw parser output against the accept-grammar for `kind`.
///
/// * yes/no: `yes` or `no`, any case, optionally quoted.
/// * number: a decimal literal such as `738`, `-1.5` or `.5`.
/// * phrase: any non-empty text; `None` (any case) is the none-marker.
/// * name list: `["a", "b"]` (single or double quotes) or `a, b`; `[]` and
///   `None` give an empty list. Names are trimmed and de-duplicated
///   case-insensitively.
pub fn validate_raw(kind: ExpectedKind, raw: &str) -> Result<Value, String> {
    let text = strip_quotes(raw);
    match kind {
        ExpectedKind::BooleanYesNo => {
            if text.eq_ignore_ascii_case("yes") {
                Ok(Value::Flag(true))
            } else if text.eq_ignore_ascii_case("no") {
                Ok(Value::Flag(false))
            } else {
                Err(format!("expected Yes or No, got `{}`", raw.trim()))
            }
        }
        ExpectedKind::Number => {
            if !is_decimal_literal(text) {
                return Err(format!("expected a decimal number, got `{}`", raw.trim()));
            }
            match text.parse::<f64>() {
                Ok(n) if n.is_finite() => Ok(Value::Number(n)),
                _ => Err(format!("number out of range: `{text}`")),
            }
        }
        ExpectedKind::PhraseOrNone => {
            if text.is_empty() {
                Err("empty phrase".into())
            } else if text.eq_ignore_ascii_case("none") {
                Ok(Value::Phrase(None))
            } else {
                Ok(Value::Phrase(Some(text.to_string())))
            }
        }
        ExpectedKind::NameList => {
            if text.eq_ignore_ascii_case("none") {
                return Ok(Value::Names(Vec::new()));
            }
            let inner = if let Some(rest) = text.strip_prefix('[') {
                rest.strip_suffix(']').ok_or_else(|| "unterminated list".to_string())?
            } else {
                if text.is_empty() {
                    return Err("empty name list".into());
                }
                text
            };
            if inner.trim().is_empty() {
                return Ok(Value::Names(Vec::new()));
            }
            let items = split_list_items(inner)?;
            Ok(Value::Names(dedup_names(items)))
        }
    }
}

/// Runs `parser` under the validation gate.
///
/// Order: validate the first response, retry once with the same request,
/// validate [`reference_parse`] output, then fail. An empty `attended_text`
/// fails with [`FailureReason::EmptyInput`] without calling the parser.
pub fn extract<P: Parser + ?Sized>(
    request: &ExtractionRequest,
    parser: &P,
) -> Result<ExtractedValue, ExtractionFailure> {
    let digest = request.digest();
    let fail = |reason, detail: String| ExtractionFailure {
        reason,
        detail,
        request_digest: digest.clone(),
    };
    if request.attended_text.trim().is_empty() {
        return Err(fail(FailureReason::EmptyInput, "no attended text".into()));
    }
    let mut last_error = String::new();
    for attempt in 1..=2u8 {
        let raw = match parser.parse(request) {
            Ok(raw) => raw,
            Err(ParserError::Unavailable(why)) if attempt == 1 => {
                return Err(fail(FailureReason::ParserUnavailable, why));
            }
            Err(ParserError::Unavailable(why)) => {
                last_error = why;
                break;
            }
        };
        match validate_raw(request.expected_kind, &raw) {
            Ok(value) => {
                return Ok(ExtractedValue {
                    value,
                    raw,
                    provenance: Provenance {
                        parser_id: parser.id().to_string(),
                        request_digest: digest,
                        attempts: attempt,
                        fallback: false,
                    },
                })
            }
            Err(e) => last_error = e,
        }
    }
    let raw = reference_parse(request);
    match validate_raw(request.expected_kind, &raw) {
        Ok(value) => Ok(ExtractedValue {
            value,
            raw,
            provenance: Provenance {
                parser_id: FALLBACK_PARSER_ID.to_string(),
                request_digest: digest,
                attempts: 2,
                fallback: true,
            },
        }),
        Err(e) => Err(fail(
            FailureReason::SchemaViolation,
            format!("{last_error}; fallback: {e}"),
        )),
    }
}

/// The deterministic keyword/scan parser.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceParser;

impl Parser for ReferenceParser {
    fn id(&self) -> &str {
        "reference"
    }

    fn parse(&self, request: &ExtractionRequest) -> Result<String, ParserError> {
        Ok(reference_parse(request))
    }
}

/// Words ignored when deriving key terms from an instruction's question.
const STOPWORDS: &[&str] = &[
    "a", "an", "and", "answer", "any", "are", "as", "at", "be", "been", "biomarker", "biomarkers",
    "but", "by", "check", "deal", "deals", "exact", "exactly", "found", "mentioned", "none", "no",
    "null", "only", "phrase", "phrases", "relevant", "specific", "status", "yes",
    "do", "does", "e", "enroll", "enrolls", "extract", "focus", "for", "from", "g", "has", "have",
    "if", "in", "include", "includes", "including", "investigate", "investigates", "involve",
    "involves", "is", "it", "its", "limited", "mention", "mentions", "not", "of", "on",
    "otherwise", "patients", "population", "populations", "report", "reports", "return", "such",
    "study", "studies", "that", "the", "this", "to", "trial", "trials", "use", "uses", "whether",
    "which", "with",
];

/// Groups of key terms from the instruction's first sentence, split on `or`.
fn key_term_groups(instruction: &str) -> Vec<Vec<String>> {
    let first = instruction
        .split(['.', '?', '\n'])
        .find(|s| !s.trim().is_empty())
        .unwrap_or("");
    let mut groups = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for tok in tokens(first) {
        if tok == "or" {
            groups.push(core::mem::take(&mut current));
        } else if !STOPWORDS.contains(&tok.as_str()) && !current.contains(&tok) {
            current.push(tok);
        }
    }
    groups.push(current);
    groups.retain(|g| !g.is_empty());
    groups
}

fn term_matches(term: &str, token: &str) -> bool {
    token == term
        || token.strip_suffix('s') == Some(term)
        || term.strip_suffix('s') == Some(token)
}

fn text_has_term(text_tokens: &[String], term: &str) -> bool {
    text_tokens.iter().any(|t| term_matches(term, t))
}

fn roman_or_digit(s: &str) -> Option<u8> {
    match s {
        "1" | "i" => Some(1),
        "2" | "ii" => Some(2),
        "3" | "iii" => Some(3),
        "4" | "iv" => Some(4),
        _ => None,
    }
}

/// Phase numbers mentioned as `phase 3`, `Phase III`, `PHASE3`, `phase_3`.
fn phase_mentions(text: &str) -> Vec<u8> {
    let toks = tokens(&text.replace('_', " "));
    let mut out = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        if let Some(rest) = t.strip_prefix("phase") {
            let numeral = if rest.is_empty() {
                toks.get(i + 1).map(String::as_str).unwrap_or("")
            } else {
                rest
            };
            if let Some(n) = roman_or_digit(numeral) {
                out.push(n);
            }
        }
    }
    out
}

/// Numeric literal scan: digits with optional `,` grouping and fraction.
fn scan_number(s: &str) -> Option<(usize, String)> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            let mut out = String::new();
            while i < bytes.len() {
                let b = bytes[i];
                if b.is_ascii_digit() {
                    out.push(b as char);
                } else if b == b','
                    && bytes.get(i + 1..i + 4).is_some_and(|g| g.iter().all(u8::is_ascii_digit))
                    && !bytes.get(i + 4).is_some_and(u8::is_ascii_digit)
                {
                    // thousands separator
                } else if b == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
                    out.push('.');
                } else {
                    break;
                }
                i += 1;
            }
            return Some((start, out));
        }
        i += 1;
    }
    None
}

fn first_number(text: &str) -> Option<String> {
    let lower = text.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    // `n=` / `n =` takes precedence over the first literal.
    for (pos, _) in lower.match_indices('n') {
        let boundary = pos == 0 || !bytes[pos - 1].is_ascii_alphanumeric();
        if !boundary {
            continue;
        }
        let rest = lower[pos + 1..].trim_start();
        if let Some(after_eq) = rest.strip_prefix('=') {
            let after_eq = after_eq.trim_start();
            if after_eq.starts_with(|c: char| c.is_ascii_digit()) {
                if let Some((0, n)) = scan_number(after_eq) {
                    return Some(n);
                }
            }
        }
    }
    scan_number(text).map(|(_, n)| n)
}

/// Strips a leading `Label:` header produced by [`crate::TrialRecord::attended_text`].
fn strip_field_label(line: &str) -> &str {
    for field in Field::ALL {
        if let Some(rest) = line.strip_prefix(field.label()) {
            if let Some(rest) = rest.strip_prefix(':') {
                return rest.trim();
            }
        }
    }
    line.trim()
}

fn looks_like_kind_tag(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_uppercase() || c == '_' || c == ' ')
        && s.chars().any(|c| c.is_ascii_uppercase())
}

fn reference_names(text: &str) -> Vec<String> {
    let mut names = Vec::new();
    for line in text.lines() {
        let line = strip_field_label(line);
        for item in line.split([';', ',']) {
            let item = item.trim();
            let name = match item.split_once(':') {
                Some((tag, rest)) if looks_like_kind_tag(tag.trim()) => rest.trim(),
                _ => item,
            };
            names.push(name.to_string());
        }
    }
    dedup_names(names)
}

fn render_number(n: &str) -> String {
    match n.split_once('.') {
        Some((int, frac)) => {
            let frac = frac.trim_end_matches('0');
            if frac.is_empty() {
                int.to_string()
            } else {
                format!("{int}.{frac}")
            }
        }
        None => n.to_string(),
    }
}

/// Deterministic keyword/regex-free heuristics, a pure function of the
/// instruction and attended text.
///
/// | kind        | rule |
/// |-------------|------|
/// | number      | first integer after `n=`; else first numeric literal (commas as thousands separators); else `None` |
/// | yes/no      | phase questions (`phase 3`, `Phase III`): `Yes` iff the text names that phase. Otherwise key terms are taken from the instruction's first sentence minus stopwords and split on `or`; `Yes` iff every term of some group occurs in the text. Default `No`. |
/// | phrase      | same term groups; the first text line containing a fully matched group (label stripped), else `None` |
/// | name list   | lines split on `;` and `,`, leading `TYPE:` tags and field labels removed, names de-duplicated; rendered as a bracketed list |
pub fn reference_parse(request: &ExtractionRequest) -> String {
    let text = request.attended_text.as_str();
    match request.expected_kind {
        ExpectedKind::Number => first_number(text)
            .map(|n| render_number(&n))
            .unwrap_or_else(|| "None".into()),
        ExpectedKind::BooleanYesNo => {
            let asked = phase_mentions(&request.instruction);
            let hit = if !asked.is_empty() {
                let present = phase_mentions(text);
                asked.iter().any(|p| present.contains(p))
            } else {
                let text_tokens = tokens(text);
                key_term_groups(&request.instruction)
                    .iter()
                    .any(|g| g.iter().all(|t| text_has_term(&text_tokens, t)))
            };
            if hit { "Yes" } else { "No" }.into()
        }
        ExpectedKind::PhraseOrNone => {
            let groups = key_term_groups(&request.instruction);
            for line in text.lines() {
                let body = strip_field_label(line);
                let line_tokens = tokens(body);
                if groups
                    .iter()
                    .any(|g| g.iter().all(|t| text_has_term(&line_tokens, t)))
                {
                    let mut phrase: String = body.chars().take(200).collect();
                    phrase = phrase.trim().to_string();
                    if !phrase.is_empty() && !phrase.eq_ignore_ascii_case("none") {
                        return phrase;
                    }
                }
            }
            "None".into()
        }
        ExpectedKind::NameList => {
            let names = reference_names(text);
            let quoted: Vec<String> = names
                .iter()
                .map(|n| format!("\"{}\"", n.replace('"', "'")))
                .collect();
            format!("[{}]", quoted.join(", "))
        }
    }
}

impl core::error::Error for ExtractionFailure {}

impl core::error::Error for ParserError {}
