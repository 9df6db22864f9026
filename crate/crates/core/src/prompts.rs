//! Prompt rendering and completion parsing.
//!
//! Template assets live in `templates/` and use `{name}` placeholders. A line
//! wrapped in square brackets is optional: it is emitted (without brackets)
//! only when every placeholder inside it has a value, otherwise it is
//! dropped together with the blank line that follows it.
//!
//! Context blocks follow one grammar, one document per line group:
//!
//! ```text
//! Document 1 (source: external, example.com): <text>
//! Document 2 (source: memory): <text>
//! ```

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const P_GEN: &str = include_str!("../templates/p_gen.txt");
pub const P_GEN_MULTI: &str = include_str!("../templates/p_gen_multi.txt");
pub const P_CON: &str = include_str!("../templates/p_con.txt");
pub const P_ANS: &str = include_str!("../templates/p_ans.txt");
pub const QA_CLOSED_BOOK: &str = include_str!("../templates/qa_closed_book.txt");
pub const QA_WITH_CONTEXT: &str = include_str!("../templates/qa_with_context.txt");
pub const GENREAD_GEN: &str = include_str!("../templates/genread_gen.txt");
pub const SELF_ROUTE: &str = include_str!("../templates/self_route.txt");
pub const USC_AGGREGATE: &str = include_str!("../templates/usc_aggregate.txt");

/// Bumped whenever a template asset changes, so stored transcripts can be
/// matched to the prompts that produced them.
pub const TEMPLATE_VERSION: u32 = 1;

pub const ANSWER_OPEN: &str = "<ANSWER>";
pub const ANSWER_CLOSE: &str = "</ANSWER>";

/// Characters of a generation completion searched for a refusal phrase.
pub const REFUSAL_WINDOW: usize = 200;

const INTERNAL_ORIGIN: &str = "memory";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("max_passages must be at least 1")]
    ZeroPassageCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTag {
    pub kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
    /// 1-based positions in the initial context this document derives from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lineage: Vec<usize>,
}

impl SourceTag {
    pub fn internal() -> Self {
        Self {
            kind: SourceKind::Internal,
            origin: Some(INTERNAL_ORIGIN.to_string()),
            lineage: Vec::new(),
        }
    }

    pub fn external(origin: impl Into<String>) -> Self {
        let origin = origin.into();
        Self {
            kind: SourceKind::External,
            origin: (!origin.trim().is_empty()).then_some(origin),
            lineage: Vec::new(),
        }
    }

    pub fn with_lineage(mut self, lineage: Vec<usize>) -> Self {
        self.lineage = lineage;
        self
    }

    pub fn is_external(&self) -> bool {
        self.kind == SourceKind::External
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDocument {
    pub text: String,
    pub source: SourceTag,
}

impl ContextDocument {
    pub fn new(text: impl Into<String>, source: SourceTag) -> Self {
        Self {
            text: text.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PassageOrder {
    AsGiven,
    /// Last document first, so the best-ranked passage sits next to the question.
    #[default]
    Reversed,
}

/// Documents plus the exact text inserted into prompts for them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextState {
    pub documents: Vec<ContextDocument>,
    pub rendered: String,
    pub step_index: usize,
}

impl ContextState {
    /// Step-0 state whose rendering comes from the documents themselves.
    pub fn initial(documents: Vec<ContextDocument>, order: PassageOrder) -> Self {
        let rendered = render_context(&documents, order);
        Self {
            documents,
            rendered,
            step_index: 0,
        }
    }

    pub fn count_kind(&self, kind: SourceKind) -> usize {
        self.documents
            .iter()
            .filter(|d| d.source.kind == kind)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub raw_response: String,
    pub extracted: Option<String>,
}

impl AnswerSpan {
    /// The extracted answer if any, else the whole response.
    pub fn scoring_text(&self) -> &str {
        self.extracted.as_deref().unwrap_or(&self.raw_response)
    }
}

// ---------------------------------------------------------------------------
// Template filling

fn fill(template: &str, vars: &[(&str, Option<&str>)]) -> String {
    let lookup = |name: &str| vars.iter().find(|(k, _)| *k == name).map(|(_, v)| *v);
    let mut out = String::with_capacity(template.len() * 2);
    let mut lines = template.split('\n').peekable();
    let mut first = true;
    while let Some(line) = lines.next() {
        let optional = line.len() >= 2 && line.starts_with('[') && line.ends_with(']');
        let body = if optional {
            let inner = &line[1..line.len() - 1];
            let all_set = placeholders(inner).all(|name| matches!(lookup(name), Some(Some(_))));
            if !all_set {
                if lines.peek() == Some(&"") {
                    lines.next();
                }
                continue;
            }
            inner
        } else {
            line
        };
        if !first {
            out.push('\n');
        }
        first = false;
        substitute_into(&mut out, body, &lookup);
    }
    out
}

fn placeholders(text: &str) -> impl Iterator<Item = &str> {
    text.match_indices('{').filter_map(move |(i, _)| {
        let rest = &text[i + 1..];
        let end = rest.find('}')?;
        let name = &rest[..end];
        is_placeholder_name(name).then_some(name)
    })
}

fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

fn substitute_into<'a>(
    out: &mut String,
    text: &str,
    lookup: &impl Fn(&str) -> Option<Option<&'a str>>,
) {
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(end) if is_placeholder_name(&after[..end]) => {
                match lookup(&after[..end]) {
                    Some(Some(value)) => out.push_str(value),
                    _ => out.push_str(&rest[open..open + end + 2]),
                }
                rest = &after[end + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
}

/// Template placeholders left unfilled in `rendered`, for completeness checks.
pub fn unfilled_placeholders<'a>(rendered: &'a str, template: &str) -> Vec<&'a str> {
    let names: Vec<&str> = placeholders(template).collect();
    placeholders(rendered)
        .filter(|n| names.contains(n))
        .collect()
}

// ---------------------------------------------------------------------------
// Context rendering

fn source_label(tag: &SourceTag) -> String {
    match (tag.kind, tag.origin.as_deref()) {
        (SourceKind::Internal, _) => INTERNAL_ORIGIN.to_string(),
        (SourceKind::External, Some(origin)) => format!("external, {origin}"),
        (SourceKind::External, None) => "external".to_string(),
    }
}

/// Numbered document blocks. Numbers always reflect positions in `documents`;
/// `order` only changes the emission order.
pub fn render_context(documents: &[ContextDocument], order: PassageOrder) -> String {
    let block = |(i, d): (usize, &ContextDocument)| {
        format!("Document {} (source: {}): {}", i + 1, source_label(&d.source), d.text)
    };
    let blocks: Vec<String> = match order {
        PassageOrder::AsGiven => documents.iter().enumerate().map(block).collect(),
        PassageOrder::Reversed => documents.iter().enumerate().rev().map(block).collect(),
    };
    blocks.join("\n")
}

fn rendered_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^Document (\d+) \(source: (memory|external)(?:, [^\n]*?)?\): ")
            .expect("valid regex")
    })
}

/// Reads back `(number, kind)` for each block of a [`render_context`] output,
/// in emission order.
pub fn parse_rendered_context(rendered: &str) -> Vec<(usize, SourceKind)> {
    rendered_header_re()
        .captures_iter(rendered)
        .map(|c| {
            let n = c[1].parse().expect("digits");
            let kind = if &c[2] == "memory" {
                SourceKind::Internal
            } else {
                SourceKind::External
            };
            (n, kind)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Astute prompts

pub fn render_gen_prompt(question: &str, max_passages: usize) -> Result<String, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    match max_passages {
        0 => Err(PromptError::ZeroPassageCap),
        1 => Ok(fill(P_GEN, &[("question", Some(question))])),
        n => {
            let cap = n.to_string();
            Ok(fill(
                P_GEN_MULTI,
                &[("question", Some(question)), ("max_passages", Some(&cap))],
            ))
        }
    }
}

pub fn render_consolidation_prompt(
    question: &str,
    initial: &ContextState,
    last: &ContextState,
) -> String {
    fill(
        P_CON,
        &[
            ("question", Some(question)),
            ("context_init", Some(&initial.rendered)),
            ("context", Some(&last.rendered)),
        ],
    )
}

pub fn render_answer_prompt(
    question: &str,
    initial: &ContextState,
    consolidated: Option<&ContextState>,
) -> String {
    fill(
        P_ANS,
        &[
            ("question", Some(question)),
            ("context_init", Some(&initial.rendered)),
            ("context", consolidated.map(|c| c.rendered.as_str())),
        ],
    )
}

// ---------------------------------------------------------------------------
// Baseline prompts

pub fn render_closed_book_prompt(question: &str) -> String {
    fill(QA_CLOSED_BOOK, &[("question", Some(question))])
}

pub fn render_rag_prompt(question: &str, context: &str) -> String {
    fill(
        QA_WITH_CONTEXT,
        &[("question", Some(question)), ("context", Some(context))],
    )
}

pub fn render_genread_prompt(question: &str) -> String {
    fill(GENREAD_GEN, &[("question", Some(question))])
}

pub fn render_self_route_prompt(question: &str, context: &str, marker: &str) -> String {
    fill(
        SELF_ROUTE,
        &[
            ("question", Some(question)),
            ("context", Some(context)),
            ("marker", Some(marker)),
        ],
    )
}

pub fn render_usc_prompt(question: &str, responses: &[String]) -> String {
    let listing = responses
        .iter()
        .enumerate()
        .map(|(i, r)| format!("Response {}: {}", i + 1, r))
        .collect::<Vec<_>>()
        .join("\n\n");
    fill(
        USC_AGGREGATE,
        &[("question", Some(question)), ("responses", Some(&listing))],
    )
}

/// Index (0-based) of the response picked by a USC aggregation completion.
pub fn parse_usc_choice(completion: &str, n: usize) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)most consistent response is\s*\**\s*response\s*#?\s*(\d+)")
            .expect("valid regex")
    });
    let k: usize = re.captures(completion)?[1].parse().ok()?;
    (1..=n).contains(&k).then(|| k - 1)
}

// ---------------------------------------------------------------------------
// Completion parsing

/// True when the completion opens with an "I don't know" style refusal.
pub fn is_refusal(text: &str) -> bool {
    let window: String = text
        .chars()
        .take(REFUSAL_WINDOW)
        .map(|c| if c == '\u{2019}' { '\'' } else { c })
        .collect::<String>()
        .to_lowercase();
    window.contains("i don't know") || window.contains("i do not know")
}

fn numbered_item_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?im)^[ \t]*[*#_]*[ \t]*(?:(?:document|passage)[ \t]+(\d+)[ \t]*[*_]*[ \t]*[.:)\-]?|(\d+)[ \t]*[*_]*[.:)])[*_]*(?:[ \t]+|$)",
        )
        .expect("valid regex")
    })
}

// (marker start, content start) of each accepted item marker
fn numbered_cuts(text: &str) -> Vec<(usize, usize)> {
    let mut cuts: Vec<(usize, usize)> = Vec::new();
    for caps in numbered_item_re().captures_iter(text) {
        let n: usize = caps
            .get(1)
            .or_else(|| caps.get(2))
            .and_then(|m| m.as_str().parse().ok())
            .unwrap_or(0);
        if n == cuts.len() + 1 {
            let whole = caps.get(0).expect("match");
            cuts.push((whole.start(), whole.end()));
        }
    }
    cuts
}

/// Splits a generation completion into internal passages.
///
/// With a cap of 1 the whole completion is one passage. Otherwise items are
/// recognised by line-leading markers `1.`, `2)`, `Document 3:` and so on,
/// which must count up from 1; any other numbers stay in the text. A refusal
/// at the start of the completion yields nothing; numbered items that are
/// themselves refusals are dropped. At most `max_passages` are kept.
pub fn parse_generated_passages(completion: &str, max_passages: usize) -> Vec<ContextDocument> {
    let text = completion.trim();
    if text.is_empty() || max_passages == 0 {
        return Vec::new();
    }
    let internal = |t: &str| ContextDocument::new(t.trim(), SourceTag::internal());
    let cuts = if max_passages > 1 {
        numbered_cuts(text)
    } else {
        Vec::new()
    };
    if cuts.is_empty() {
        return if is_refusal(text) {
            Vec::new()
        } else {
            vec![internal(text)]
        };
    }
    if is_refusal(&text[..cuts[0].0]) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, &(_, content_start)) in cuts.iter().enumerate() {
        let end = cuts.get(i + 1).map_or(text.len(), |&(start, _)| start);
        let item = text[content_start..end].trim();
        if item.is_empty() || is_refusal(item) {
            continue;
        }
        out.push(internal(item));
        if out.len() == max_passages {
            break;
        }
    }
    out
}

/// Content of the first well-formed `<ANSWER>...</ANSWER>` pair, trimmed.
///
/// Tags match case-insensitively. An opening tag followed by another opening
/// tag before its close is malformed and yields no extraction.
pub fn extract_answer(completion: &str) -> AnswerSpan {
    let lower = completion.to_ascii_lowercase();
    let open = ANSWER_OPEN.to_ascii_lowercase();
    let close = ANSWER_CLOSE.to_ascii_lowercase();
    let extracted = lower.find(&open).and_then(|start| {
        let body_start = start + open.len();
        let body_end = body_start + lower[body_start..].find(&close)?;
        if lower[body_start..body_end].contains(&open) {
            return None;
        }
        Some(completion[body_start..body_end].trim().to_string())
    });
    AnswerSpan {
        raw_response: completion.to_string(),
        extracted,
    }
}

pub fn wrap_answer(answer: &str) -> String {
    format!("{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

// ---------------------------------------------------------------------------
// Consolidation output parsing (tracing only)

fn consolidated_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[ \t]*[*#_\-]*[ \t]*(?:new[ \t]+)?document[ \t]*#?[ \t]*(\d+)\b[*_]*[ \t]*[:.)\-]?[*_]*(.*)$")
            .expect("valid regex")
    })
}

fn lineage_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:documents?|docs?)\b(?:[ \t]+numbers?)?[ \t]*[:#]?[ \t]*(\d+(?:[ \t]*(?:-|–|to)[ \t]*\d+)?(?:[ \t]*(?:,|and|&|;|/)[ \t]*(?:documents?[ \t]*|#)?\d+(?:[ \t]*(?:-|–|to)[ \t]*\d+)?)*)")
            .expect("valid regex")
    })
}

fn int_or_range_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(\d+)(?:[ \t]*(?:-|–|to)[ \t]*(\d+))?").expect("valid regex")
    })
}

/// Document numbers cited in `line` after a "document(s)" keyword,
/// limited to `1..=max`.
fn cited_documents(line: &str, max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for caps in lineage_re().captures_iter(line) {
        for m in int_or_range_re().captures_iter(&caps[1]) {
            let lo: usize = m[1].parse().unwrap_or(0);
            let hi: usize = m.get(2).and_then(|h| h.as_str().parse().ok()).unwrap_or(lo);
            if hi < lo || hi - lo > max {
                continue;
            }
            out.extend((lo..=hi).filter(|n| (1..=max).contains(n)));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn is_source_line(lower: &str) -> bool {
    lower.contains("source") || lower.contains("original document")
}

/// Best-effort structure of a consolidation completion.
///
/// Blocks start at lines such as `Document 2:` or `**New Document 1**`. In
/// each block, lines mentioning a source or original documents supply the
/// lineage (numbers that follow a "document" keyword) and the source kind.
/// A block is internal when every cited document is internal in `initial`, or
/// when it mentions memory and not external retrieval; otherwise external.
/// Text without any block headers becomes one document.
pub fn parse_consolidated(completion: &str, initial: &[ContextDocument]) -> Vec<ContextDocument> {
    let text = completion.trim();
    if text.is_empty() {
        return Vec::new();
    }
    let headers: Vec<_> = consolidated_header_re().captures_iter(text).collect();
    let mut blocks: Vec<(&str, &str)> = Vec::new();
    if headers.is_empty() {
        blocks.push(("", text));
    } else {
        for (i, h) in headers.iter().enumerate() {
            let whole = h.get(0).expect("match");
            let end = headers
                .get(i + 1)
                .map_or(text.len(), |n| n.get(0).expect("match").start());
            let tail = h.get(2).map_or("", |m| m.as_str());
            blocks.push((tail, &text[whole.end()..end]));
        }
    }

    let max = initial.len();
    blocks
        .into_iter()
        .map(|(header_tail, body)| {
            let mut lineage = Vec::new();
            let mut mentions_memory = false;
            let mut mentions_external = false;
            let mut content = Vec::new();
            let mut inspect = |line: &str, keep: bool, content: &mut Vec<String>| {
                let lower = line.to_lowercase();
                if is_source_line(&lower) || (!keep && lower.contains("document")) {
                    mentions_memory |= lower.contains("memory") || lower.contains("internal");
                    mentions_external |= lower.contains("external") || lower.contains("retriev");
                    lineage.extend(cited_documents(line, max));
                    let stripped = line.trim().trim_start_matches(['*', '-', ' ']).to_lowercase();
                    let label_only = stripped.starts_with("source")
                        || stripped.starts_with("original document");
                    if keep && !label_only {
                        content.push(line.trim().to_string());
                    }
                } else if keep && !line.trim().is_empty() {
                    content.push(line.trim().to_string());
                }
            };
            let tail_lower = header_tail.to_lowercase();
            let tail_is_metadata = is_source_line(&tail_lower) || tail_lower.contains("document");
            inspect(header_tail, !tail_is_metadata, &mut content);
            for line in body.lines() {
                inspect(line, true, &mut content);
            }
            lineage.sort_unstable();
            lineage.dedup();
            let all_internal_lineage = !lineage.is_empty()
                && lineage
                    .iter()
                    .all(|&n| initial[n - 1].source.kind == SourceKind::Internal);
            let kind = if all_internal_lineage || (lineage.is_empty() && mentions_memory && !mentions_external) {
                SourceKind::Internal
            } else {
                SourceKind::External
            };
            let origin = match kind {
                SourceKind::Internal => Some(INTERNAL_ORIGIN.to_string()),
                SourceKind::External => None,
            };
            let body_text = content
                .join("\n")
                .trim_start_matches(|c: char| c == ':' || c.is_whitespace())
                .to_string();
            ContextDocument {
                text: body_text,
                source: SourceTag {
                    kind,
                    origin,
                    lineage,
                },
            }
        })
        .filter(|d| !d.text.is_empty() || !d.source.lineage.is_empty())
        .collect()
}
