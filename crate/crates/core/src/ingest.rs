//! Document loading, TeX cleanup and word-window chunking.
//!
//! Everything here is a pure function of its inputs, so ingestion can be
//! fanned out across threads without coordination.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("document id must not be empty")]
    EmptyDocId,
    #[error("{source_name}: contents are not valid UTF-8")]
    UndecodableText { source_name: String },
    #[error("document {doc_id} has no words after normalization")]
    EmptyDocument { doc_id: String },
    #[error("invalid chunking policy: overlap {overlap_words} must be smaller than chunk size {chunk_words} (and chunk size > 0)")]
    InvalidPolicy {
        chunk_words: usize,
        overlap_words: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocFormat {
    Tex,
    Plain,
}

impl DocFormat {
    /// `.tex` maps to TeX, everything else is plain text.
    pub fn from_source_name(source_name: &str) -> Self {
        let is_tex = Path::new(source_name)
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("tex"));
        if is_tex {
            DocFormat::Tex
        } else {
            DocFormat::Plain
        }
    }
}

impl std::str::FromStr for DocFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tex" => Ok(DocFormat::Tex),
            "plain" => Ok(DocFormat::Plain),
            other => Err(format!("unknown document format `{other}` (expected tex|plain)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doc_id: String,
    pub source_name: String,
    pub format: DocFormat,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedDocument {
    pub doc_id: String,
    pub source_name: String,
    pub words: Vec<String>,
}

impl NormalizedDocument {
    pub fn word_count(&self) -> usize {
        self.words.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct ChunkingPolicy {
    chunk_words: usize,
    overlap_words: usize,
}

#[derive(Deserialize)]
#[serde(default)]
struct RawPolicy {
    chunk_words: usize,
    overlap_words: usize,
}

impl Default for RawPolicy {
    fn default() -> Self {
        let p = ChunkingPolicy::default();
        RawPolicy {
            chunk_words: p.chunk_words,
            overlap_words: p.overlap_words,
        }
    }
}

impl TryFrom<RawPolicy> for ChunkingPolicy {
    type Error = IngestError;

    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        ChunkingPolicy::new(raw.chunk_words, raw.overlap_words)
    }
}

impl Default for ChunkingPolicy {
    fn default() -> Self {
        ChunkingPolicy {
            chunk_words: 500,
            overlap_words: 50,
        }
    }
}

impl ChunkingPolicy {
    pub fn new(chunk_words: usize, overlap_words: usize) -> Result<Self, IngestError> {
        if chunk_words == 0 || overlap_words >= chunk_words {
            return Err(IngestError::InvalidPolicy {
                chunk_words,
                overlap_words,
            });
        }
        Ok(ChunkingPolicy {
            chunk_words,
            overlap_words,
        })
    }

    pub fn chunk_words(&self) -> usize {
        self.chunk_words
    }

    pub fn overlap_words(&self) -> usize {
        self.overlap_words
    }

    pub fn stride(&self) -> usize {
        self.chunk_words - self.overlap_words
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub source_name: String,
    pub seq: usize,
    /// Half-open word range into the normalized document.
    pub word_span: Range<usize>,
    pub text: String,
}

/// Resolves the format (an explicit hint wins over the file extension) and
/// decodes the contents.
pub fn load_document(
    source_name: &str,
    contents: &[u8],
    format_hint: Option<DocFormat>,
    doc_id: &str,
) -> Result<RawDocument, IngestError> {
    if doc_id.is_empty() {
        return Err(IngestError::EmptyDocId);
    }
    let text = std::str::from_utf8(contents).map_err(|_| IngestError::UndecodableText {
        source_name: source_name.to_string(),
    })?;
    Ok(RawDocument {
        doc_id: doc_id.to_string(),
        source_name: source_name.to_string(),
        format: format_hint.unwrap_or_else(|| DocFormat::from_source_name(source_name)),
        text: text.to_string(),
    })
}

pub fn normalize(raw: &RawDocument) -> NormalizedDocument {
    let cleaned;
    let text = match raw.format {
        DocFormat::Plain => raw.text.as_str(),
        DocFormat::Tex => {
            cleaned = clean_tex(&raw.text);
            cleaned.as_str()
        }
    };
    NormalizedDocument {
        doc_id: raw.doc_id.clone(),
        source_name: raw.source_name.clone(),
        words: split_words(text),
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Splits a normalized document into overlapping word windows.
///
/// Window `i` covers `[i * stride, min(i * stride + chunk_words, n))`; the
/// last window is the first one that reaches the end of the document.
pub fn chunk_document(
    doc: &NormalizedDocument,
    policy: ChunkingPolicy,
) -> Result<Vec<Chunk>, IngestError> {
    let n = doc.word_count();
    if n == 0 {
        return Err(IngestError::EmptyDocument {
            doc_id: doc.doc_id.clone(),
        });
    }
    let stride = policy.stride();
    let mut chunks = Vec::with_capacity(n.div_ceil(stride));
    let mut start = 0;
    loop {
        let end = (start + policy.chunk_words).min(n);
        let seq = chunks.len();
        chunks.push(Chunk {
            chunk_id: format!("{}#{}", doc.doc_id, seq),
            doc_id: doc.doc_id.clone(),
            source_name: doc.source_name.clone(),
            seq,
            word_span: start..end,
            text: doc.words[start..end].join(" "),
        });
        if end == n {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

// ---------------------------------------------------------------------------
// TeX cleanup

const ESCAPED_PERCENT: char = '\u{E000}';

const MATH_ENVIRONMENTS: &[&str] = &[
    "equation",
    "equation*",
    "align",
    "align*",
    "eqnarray",
    "eqnarray*",
    "gather",
    "gather*",
    "multline",
    "multline*",
    "displaymath",
    "math",
];

fn clean_tex(text: &str) -> String {
    let body = document_body(text);
    let body = strip_comments(body);
    let mut out = String::with_capacity(body.len());
    for segment in split_math(&body) {
        match segment {
            Segment::Math(m) => out.push_str(m),
            Segment::Text(t) => {
                let t = drop_reference_commands(t);
                let t = unwrap_headings(&t);
                out.push_str(&strip_commands(&t));
            }
        }
        // keep segment boundaries from gluing words together
        out.push(' ');
    }
    out
}

fn document_body(text: &str) -> &str {
    const BEGIN: &str = "\\begin{document}";
    const END: &str = "\\end{document}";
    if let Some(b) = text.find(BEGIN) {
        let body_start = b + BEGIN.len();
        if let Some(e) = text[body_start..].find(END) {
            return &text[body_start..body_start + e];
        }
    }
    text
}

fn strip_comments(text: &str) -> String {
    let protected = text.replace("\\%", &ESCAPED_PERCENT.to_string());
    let mut out = String::with_capacity(protected.len());
    for (i, line) in protected.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        match line.find('%') {
            Some(pos) => out.push_str(&line[..pos]),
            None => out.push_str(line),
        }
    }
    out.replace(ESCAPED_PERCENT, "%")
}

enum Segment<'a> {
    Text(&'a str),
    Math(&'a str),
}

/// Splits text into math regions (kept verbatim) and ordinary text.
/// Unterminated math openers are treated as ordinary text.
fn split_math(text: &str) -> Vec<Segment<'_>> {
    let mut segments = Vec::new();
    let bytes = text.as_bytes();
    let mut text_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let rest = &text[i..];
        let closing = if bytes[i] == b'\\' {
            if let Some(body) = rest.strip_prefix("\\[") {
                body.find("\\]").map(|e| e + 4)
            } else if let Some(env) = math_environment(rest) {
                let end_tag = format!("\\end{{{env}}}");
                rest.find(&end_tag).map(|e| e + end_tag.len())
            } else {
                // skip escaped characters such as \$
                i += 1 + rest[1..].chars().next().map_or(0, char::len_utf8);
                continue;
            }
        } else if let Some(body) = rest.strip_prefix("$$") {
            body.find("$$").map(|e| e + 4)
        } else if bytes[i] == b'$' {
            find_unescaped_dollar(&rest[1..]).map(|e| e + 2)
        } else {
            None
        };
        match closing {
            Some(len) => {
                if text_start < i {
                    segments.push(Segment::Text(&text[text_start..i]));
                }
                segments.push(Segment::Math(&text[i..i + len]));
                i += len;
                text_start = i;
            }
            None => i += rest.chars().next().map_or(1, char::len_utf8),
        }
    }
    if text_start < text.len() {
        segments.push(Segment::Text(&text[text_start..]));
    }
    segments
}

fn math_environment(rest: &str) -> Option<&'static str> {
    let after = rest.strip_prefix("\\begin{")?;
    MATH_ENVIRONMENTS
        .iter()
        .find(|env| after.starts_with(**env) && after[env.len()..].starts_with('}'))
        .copied()
}

fn find_unescaped_dollar(s: &str) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'$' => return Some(i),
            _ => i += 1,
        }
    }
    None
}

/// Reads `\name` at the start of `s`; returns the name.
fn command_name(s: &str) -> Option<&str> {
    let rest = s.strip_prefix('\\')?;
    let len = rest
        .bytes()
        .take_while(|b| b.is_ascii_alphabetic())
        .count();
    (len > 0).then(|| &rest[..len])
}

/// Length of a balanced `{...}` group at the start of `s`, braces included.
fn brace_group_len(s: &str) -> Option<usize> {
    if !s.starts_with('{') {
        return None;
    }
    let mut depth = 0usize;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        match c {
            '\\' => escaped = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Length of an optional `[...]` argument at the start of `s`.
fn bracket_group_len(s: &str) -> usize {
    if s.starts_with('[') {
        s.find(']').map_or(0, |e| e + 1)
    } else {
        0
    }
}

fn drop_reference_commands(text: &str) -> String {
    rewrite_commands(text, &["cite", "ref", "label"], |_| String::new())
}

fn unwrap_headings(text: &str) -> String {
    rewrite_commands(text, &["section", "subsection"], |arg| format!(" {arg} "))
}

/// Replaces `\name[opt]{arg}` (and starred forms) for the listed names with
/// `replace(arg)`. Commands without a brace argument are left alone.
fn rewrite_commands(text: &str, names: &[&str], replace: impl Fn(&str) -> String) -> String {
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if let Some(name) = command_name(rest).filter(|n| names.contains(n)) {
            let mut j = 1 + name.len();
            if rest[j..].starts_with('*') {
                j += 1;
            }
            j += bracket_group_len(&rest[j..]);
            if let Some(len) = brace_group_len(&rest[j..]) {
                out.push_str(&replace(&rest[j + 1..j + len - 1]));
                i += j + len;
                continue;
            }
        }
        let c = rest.chars().next().expect("non-empty remainder");
        if c == '\\' {
            // copy an escape pair verbatim so `\\cite` is not misread
            let next = rest[1..].chars().next().map_or(0, char::len_utf8);
            out.push_str(&rest[..1 + next]);
            i += 1 + next;
        } else {
            out.push(c);
            i += c.len_utf8();
        }
    }
    out
}

/// Removes `\command` tokens. Brace groups that serve as a command's
/// arguments lose their braces but keep their contents.
fn strip_commands(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    // true = this open brace belongs to a stripped command's argument
    let mut braces: Vec<bool> = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if let Some(name) = command_name(rest) {
            i += 1 + name.len();
            if text[i..].starts_with('*') {
                i += 1;
            }
            if text[i..].starts_with('{') {
                braces.push(true);
                i += 1;
            } else {
                out.push(' ');
            }
            continue;
        }
        let c = rest.chars().next().expect("non-empty remainder");
        match c {
            '\\' => {
                let next = rest[1..].chars().next().map_or(0, char::len_utf8);
                out.push_str(&rest[..1 + next]);
                i += 1 + next;
                continue;
            }
            '{' => {
                braces.push(false);
                out.push(c);
            }
            '}' => match braces.pop() {
                Some(true) => {
                    // adjacent groups (`\frac{a}{b}`) are further arguments
                    if text[i + 1..].starts_with('{') {
                        braces.push(true);
                        i += 2;
                        out.push(' ');
                        continue;
                    }
                }
                _ => out.push(c),
            },
            _ => out.push(c),
        }
        i += c.len_utf8();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tex_words(text: &str) -> Vec<String> {
        let raw = load_document("t.tex", text.as_bytes(), None, "t").unwrap();
        normalize(&raw).words
    }

    fn doc(n: usize) -> NormalizedDocument {
        NormalizedDocument {
            doc_id: "d".into(),
            source_name: "d.txt".into(),
            words: (0..n).map(|i| format!("w{i}")).collect(),
        }
    }

    #[test]
    fn format_from_extension_and_hint() {
        let a = load_document("a.tex", b"\\documentclass{article}", None, "a").unwrap();
        assert_eq!(a.format, DocFormat::Tex);
        let n = load_document("notes.txt", b"hello", None, "n").unwrap();
        assert_eq!(n.format, DocFormat::Plain);
        let h = load_document("a.tex", b"...", Some(DocFormat::Plain), "a").unwrap();
        assert_eq!(h.format, DocFormat::Plain);
        assert_eq!(DocFormat::from_source_name("x/Notes.TEX"), DocFormat::Tex);
        assert_eq!(DocFormat::from_source_name("README"), DocFormat::Plain);
    }

    #[test]
    fn load_errors() {
        assert_eq!(
            load_document("a.txt", b"x", None, ""),
            Err(IngestError::EmptyDocId)
        );
        assert!(matches!(
            load_document("a.txt", &[0xff, 0xfe], None, "a"),
            Err(IngestError::UndecodableText { .. })
        ));
    }

    #[test]
    fn keeps_document_body_and_drops_comments() {
        assert_eq!(
            tex_words("pre \\begin{document}Hello % note\nworld\\end{document} post"),
            ["Hello", "world"]
        );
    }

    #[test]
    fn escaped_percent_survives() {
        assert_eq!(tex_words("a \\% b % gone"), ["a", "%", "b"]);
    }

    #[test]
    fn references_removed() {
        assert_eq!(
            tex_words("See \\cite{x1} the melt pool"),
            ["See", "the", "melt", "pool"]
        );
        assert_eq!(
            tex_words("Fig.\\ref{f:1} and\\label{sec:a} more \\cite[p.~3]{a,b}"),
            ["Fig.", "and", "more"]
        );
    }

    #[test]
    fn headings_unwrapped() {
        assert_eq!(
            tex_words("\\section{Melt Pool}text\\subsection*{Defects}"),
            ["Melt", "Pool", "text", "Defects"]
        );
    }

    #[test]
    fn inline_math_verbatim() {
        assert_eq!(
            tex_words("energy $E = \\alpha P / v$ density"),
            ["energy", "$E", "=", "\\alpha", "P", "/", "v$", "density"]
        );
    }

    #[test]
    fn display_math_environment_verbatim() {
        assert_eq!(
            tex_words("x \\begin{equation}\\frac{a}{b}\\end{equation} y"),
            ["x", "\\begin{equation}\\frac{a}{b}\\end{equation}", "y"]
        );
    }

    #[test]
    fn commands_stripped_arguments_kept() {
        assert_eq!(
            tex_words("\\textbf{higher melting} point \\emph{is} \\noindent key"),
            ["higher", "melting", "point", "is", "key"]
        );
        assert_eq!(tex_words("\\href{url}{label}"), ["url", "label"]);
        assert_eq!(tex_words("keep {plain} braces"), ["keep", "{plain}", "braces"]);
    }

    #[test]
    fn unterminated_math_is_text() {
        assert_eq!(tex_words("cost $5 \\textit{only}"), ["cost", "$5", "only"]);
    }

    #[test]
    fn plain_only_splits_whitespace() {
        let raw = load_document("a.txt", b"  \\cite{x}  a\n\tb ", None, "a").unwrap();
        assert_eq!(normalize(&raw).words, ["\\cite{x}", "a", "b"]);
    }

    #[test]
    fn chunk_spans_1200() {
        let chunks = chunk_document(&doc(1200), ChunkingPolicy::default()).unwrap();
        let spans: Vec<_> = chunks.iter().map(|c| c.word_span.clone()).collect();
        assert_eq!(spans, [0..500, 450..950, 900..1200]);
        assert_eq!(chunks[2].chunk_id, "d#2");
        assert_eq!(chunks[1].seq, 1);
    }

    #[test]
    fn short_document_single_chunk() {
        let chunks = chunk_document(&doc(300), ChunkingPolicy::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].word_span, 0..300);
        assert_eq!(chunks[0].text.split(' ').count(), 300);
    }

    #[test]
    fn exact_fit_does_not_emit_empty_tail() {
        let chunks = chunk_document(&doc(500), ChunkingPolicy::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        let chunks = chunk_document(&doc(950), ChunkingPolicy::default()).unwrap();
        assert_eq!(chunks.len(), 2);
    }

    #[test]
    fn empty_document_rejected() {
        assert_eq!(
            chunk_document(&doc(0), ChunkingPolicy::default()),
            Err(IngestError::EmptyDocument { doc_id: "d".into() })
        );
    }

    #[test]
    fn policy_validation() {
        assert!(ChunkingPolicy::new(10, 10).is_err());
        assert!(ChunkingPolicy::new(0, 0).is_err());
        assert_eq!(ChunkingPolicy::new(10, 9).unwrap().stride(), 1);
        let p: ChunkingPolicy = serde_json::from_str(r#"{"chunk_words":200}"#).unwrap();
        assert_eq!((p.chunk_words(), p.overlap_words()), (200, 50));
        assert!(serde_json::from_str::<ChunkingPolicy>(r#"{"chunk_words":40}"#).is_err());
    }
}
