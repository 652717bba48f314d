//! Turning raw model text into findings and diagnoses.
//!
//! Every reply goes through the same ladder and the first rung that yields a
//! valid value wins:
//!
//! 1. `strict`: the whole reply is the canonical JSON object.
//! 2. `fenced`: a JSON object found inside a code fence or after leading
//!    prose. Light syntax damage (trailing commas, single quotes, bare keys,
//!    Python literals, a missing closing brace) is tolerated here.
//! 3. `keyword_fallback`: cue words in plain prose.
//!
//! When the ladder fails the caller may send [`repair_prompt`] and parse the
//! follow-up; values recovered that way are reported with
//! [`ParseMethod::Repaired`].

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::domain::{ConceptFinding, DiagnosisLabel, DiagnosisResult, Stage};
use crate::prompt::{RenderedPrompt, CONCEPT_FORMAT, DIAGNOSIS_FORMAT};

pub const DEFAULT_MAX_REPAIR_ROUNDS: u32 = 2;

const AFFIRMATIVE: &[&str] = &["yes", "present", "observed", "visible"];
const NEGATIVE: &[&str] = &["no", "absent", "not"];

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ParseError {
    #[error("reply could not be parsed: {0}")]
    Unparseable(String),
    #[error("diagnosis `{0}` is not one of the configured classes")]
    UnknownDiagnosis(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMethod {
    Strict,
    Fenced,
    KeywordFallback,
    Repaired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome<T> {
    pub value: T,
    pub method: ParseMethod,
    pub repair_rounds: u32,
}

impl<T> ParseOutcome<T> {
    fn direct(value: T, method: ParseMethod) -> Self {
        Self {
            value,
            method,
            repair_rounds: 0,
        }
    }

    /// Marks a value recovered after `rounds` repair exchanges.
    pub fn repaired(self, rounds: u32) -> Self {
        if rounds == 0 {
            return self;
        }
        Self {
            value: self.value,
            method: ParseMethod::Repaired,
            repair_rounds: rounds,
        }
    }
}

// --- concept replies -------------------------------------------------------

pub fn parse_concept(raw: &str, concept_id: &str) -> Result<ParseOutcome<ConceptFinding>, ParseError> {
    let text = raw.trim();
    if text.is_empty() {
        return Err(ParseError::Unparseable("empty reply".into()));
    }
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(text) {
        if let Some(f) = concept_from_object(&obj, concept_id, true) {
            return Ok(ParseOutcome::direct(f, ParseMethod::Strict));
        }
    }
    for candidate in json_candidates(text) {
        if let Some(f) = concept_from_object(&candidate, concept_id, false) {
            return Ok(ParseOutcome::direct(f, ParseMethod::Fenced));
        }
    }
    if let Some(f) = concept_from_keywords(text, concept_id) {
        return Ok(ParseOutcome::direct(f, ParseMethod::KeywordFallback));
    }
    Err(ParseError::Unparseable(format!(
        "no presence answer for `{concept_id}` found"
    )))
}

fn concept_from_object(obj: &Map<String, Value>, concept_id: &str, strict: bool) -> Option<ConceptFinding> {
    let present = match obj.get("present")? {
        Value::Bool(b) => *b,
        other if !strict => coerce_bool(other)?,
        _ => return None,
    };
    let description = match obj.get("description") {
        Some(Value::String(s)) => s.trim().to_string(),
        None | Some(Value::Null) if !strict && !present => String::new(),
        _ => return None,
    };
    if present && description.is_empty() {
        return None;
    }
    Some(ConceptFinding {
        concept_id: concept_id.to_string(),
        present: present as u8,
        description,
        confidence_note: obj
            .get("confidence")
            .and_then(|c| match c {
                Value::String(s) => Some(s.clone()),
                Value::Number(n) => Some(n.to_string()),
                _ => None,
            }),
    })
}

fn coerce_bool(value: &Value) -> Option<bool> {
    match value {
        Value::Bool(b) => Some(*b),
        Value::Number(n) => match n.as_i64()? {
            0 => Some(false),
            1 => Some(true),
            _ => None,
        },
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" | "present" | "1" => Some(true),
            "false" | "no" | "absent" | "0" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

fn first_sentence(text: &str) -> &str {
    let end = text
        .char_indices()
        .find(|&(_, c)| matches!(c, '.' | '!' | '?' | '\n'))
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(text.len());
    &text[..end]
}

fn concept_from_keywords(text: &str, concept_id: &str) -> Option<ConceptFinding> {
    if text.starts_with('{') || text.starts_with("```") {
        return None;
    }
    let cues = words(first_sentence(text));
    // Negative cues win so that "not present" reads as absent.
    let present = if cues.iter().any(|w| NEGATIVE.contains(&w.as_str())) {
        false
    } else if cues.iter().any(|w| AFFIRMATIVE.contains(&w.as_str())) {
        true
    } else {
        return None;
    };
    Some(ConceptFinding {
        concept_id: concept_id.to_string(),
        present: present as u8,
        description: strip_leading_cue(text),
        confidence_note: None,
    })
}

// "No, the lesion is symmetric." -> "the lesion is symmetric."
fn strip_leading_cue(text: &str) -> String {
    let lead_end = text
        .find(|c: char| !c.is_alphabetic())
        .unwrap_or(text.len());
    let lead = text[..lead_end].to_ascii_lowercase();
    if lead == "yes" || lead == "no" {
        let rest = text[lead_end..].trim_start_matches(|c: char| {
            c.is_whitespace() || matches!(c, ',' | '.' | ':' | ';' | '!' | '-')
        });
        if !rest.trim().is_empty() {
            return rest.trim().to_string();
        }
    }
    text.trim().to_string()
}

// --- diagnosis replies -----------------------------------------------------

pub fn parse_diagnosis(
    raw: &str,
    classes: &[DiagnosisLabel],
) -> Result<ParseOutcome<DiagnosisResult>, ParseError> {
    let text = raw.trim();
    if text.is_empty() {
        return Err(ParseError::Unparseable("empty reply".into()));
    }
    if classes.is_empty() {
        return Err(ParseError::Unparseable("no classes configured".into()));
    }

    let mut unknown: Option<String> = None;
    let mut attempt = |fields: Option<(String, String)>, method: ParseMethod| {
        let (label_text, rationale) = fields?;
        match match_label(&label_text, classes) {
            Some(id) => build_diagnosis(id, rationale).map(|d| ParseOutcome::direct(d, method)),
            None => {
                unknown.get_or_insert(label_text);
                None
            }
        }
    };

    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(text) {
        if let Some(out) = attempt(diagnosis_fields(&obj, true), ParseMethod::Strict) {
            return Ok(out);
        }
    }
    for candidate in json_candidates(text) {
        if let Some(out) = attempt(diagnosis_fields(&candidate, false), ParseMethod::Fenced) {
            return Ok(out);
        }
    }
    if let Some(out) = attempt(diagnosis_from_lines(text), ParseMethod::KeywordFallback) {
        return Ok(out);
    }
    Err(match unknown {
        Some(label) => ParseError::UnknownDiagnosis(label),
        None => ParseError::Unparseable("no diagnosis found".into()),
    })
}

fn diagnosis_fields(obj: &Map<String, Value>, strict: bool) -> Option<(String, String)> {
    let label = match obj.get("diagnosis") {
        Some(Value::String(s)) => s.clone(),
        None if !strict => obj.get("label")?.as_str()?.to_string(),
        _ => return None,
    };
    let rationale = match obj.get("rationale") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(steps)) if !strict => steps
            .iter()
            .filter_map(Value::as_str)
            .collect::<Vec<_>>()
            .join(" "),
        _ => return None,
    };
    Some((label, rationale))
}

fn diagnosis_from_lines(text: &str) -> Option<(String, String)> {
    let mut label = None;
    let mut rationale = None;
    let mut other = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim().trim_start_matches(['*', '#', '-', ' ']);
        let lower = trimmed.to_ascii_lowercase();
        let field = |name: &str| -> Option<String> {
            let rest = lower
                .strip_prefix("final ")
                .unwrap_or(&lower)
                .strip_prefix(name)?;
            let rest_start = trimmed.len() - rest.len();
            let value = trimmed[rest_start..]
                .trim_start_matches(['*', ' '])
                .strip_prefix([':', '=', '-'])?;
            Some(value.trim().trim_matches(['*', '"', '\'', '`']).trim().to_string())
        };
        if label.is_none() {
            if let Some(v) = field("diagnosis") {
                label = Some(v.trim_end_matches('.').trim().to_string());
                continue;
            }
        }
        if rationale.is_none() {
            if let Some(v) = field("rationale") {
                rationale = Some(v);
                continue;
            }
        }
        if !line.trim().is_empty() {
            other.push(line.trim().to_string());
        }
    }
    let label = label.filter(|l| !l.is_empty())?;
    let rationale = rationale.unwrap_or_else(|| other.join(" "));
    Some((label, rationale))
}

fn normalize_label(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Case-insensitive match against class ids and display names.
pub fn match_label<'a>(text: &str, classes: &'a [DiagnosisLabel]) -> Option<&'a str> {
    let wanted = normalize_label(text);
    if wanted.is_empty() {
        return None;
    }
    classes
        .iter()
        .find(|c| normalize_label(&c.id) == wanted || normalize_label(&c.display_name) == wanted)
        .map(|c| c.id.as_str())
}

fn build_diagnosis(label: &str, rationale: String) -> Option<DiagnosisResult> {
    let steps = split_steps(&rationale);
    if steps.is_empty() {
        return None;
    }
    Some(DiagnosisResult {
        label: label.to_string(),
        rationale: steps,
        raw_rationale: rationale,
    })
}

/// Splits a rationale into sentences: breaks after `.`, `!` or `?` followed
/// by whitespace, and at line breaks.
pub fn split_steps(text: &str) -> Vec<String> {
    let mut steps = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\n' {
            push_step(&mut steps, &mut current);
            continue;
        }
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            push_step(&mut steps, &mut current);
        }
    }
    push_step(&mut steps, &mut current);
    steps
}

fn push_step(steps: &mut Vec<String>, current: &mut String) {
    let step = current.trim();
    if !step.is_empty() {
        steps.push(step.to_string());
    }
    current.clear();
}

// --- canonical forms ---------------------------------------------------------

pub fn canonical_concept_json(finding: &ConceptFinding) -> String {
    json!({"present": finding.is_present(), "description": finding.description}).to_string()
}

pub fn canonical_diagnosis_json(result: &DiagnosisResult) -> String {
    json!({"diagnosis": result.label, "rationale": result.raw_rationale}).to_string()
}

// --- repair ------------------------------------------------------------------

/// Follow-up prompt asking the model to restate a reply in the required
/// shape. Same stage as `original`, no image, one repair round later.
pub fn repair_prompt(
    raw: &str,
    error: &ParseError,
    original: &RenderedPrompt,
    classes: &[DiagnosisLabel],
) -> RenderedPrompt {
    let mut text = String::new();
    match (&original.stage, &original.concept_id) {
        (Stage::Perception, Some(concept)) => text.push_str(&format!(
            "Your previous answer about the concept `{concept}` could not be used ({error}).\n"
        )),
        _ => text.push_str(&format!("Your previous answer could not be used ({error}).\n")),
    }
    text.push_str("Previous answer:\n<<<\n");
    text.push_str(raw.trim());
    text.push_str("\n>>>\n");
    if let ParseError::UnknownDiagnosis(_) = error {
        text.push_str("The diagnosis must be exactly one of these class ids: ");
        text.push_str(
            &classes
                .iter()
                .map(|c| c.id.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        );
        text.push_str(".\n");
    }
    text.push_str(match original.stage {
        Stage::Perception => CONCEPT_FORMAT,
        Stage::Reasoning => DIAGNOSIS_FORMAT,
    });
    RenderedPrompt {
        text: text.replace("{{", "{ {"),
        stage: original.stage,
        concept_id: original.concept_id.clone(),
        attach_image: false,
        repair_round: original.repair_round + 1,
    }
}

// --- JSON candidate extraction -----------------------------------------------

/// JSON objects embedded in `text`: fenced blocks first, then balanced
/// `{...}` spans, then an unterminated trailing object closed off. Each
/// candidate is parsed as-is or after light repair.
fn json_candidates(text: &str) -> Vec<Map<String, Value>> {
    let mut spans: Vec<String> = fenced_blocks(text);
    spans.extend(balanced_objects(text));
    if let Some(tail) = unterminated_tail(text) {
        spans.push(tail);
    }
    let mut out = Vec::new();
    for span in spans {
        let parsed = serde_json::from_str::<Value>(&span)
            .ok()
            .or_else(|| serde_json::from_str::<Value>(&loosen(&span)).ok());
        if let Some(Value::Object(obj)) = parsed {
            out.push(obj);
        }
    }
    out
}

fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let Some(end) = after[body_start..].find("```") else {
            break;
        };
        blocks.push(after[body_start..body_start + end].trim().to_string());
        rest = &after[body_start + end + 3..];
    }
    blocks
}

fn balanced_objects(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    let mut found = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = matching_brace(bytes, i) {
                found.push(text[i..=end].to_string());
                i = end + 1;
                continue;
            }
        }
        i += 1;
    }
    found
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == q {
                quote = None;
            }
            continue;
        }
        match b {
            b'"' => quote = Some(b),
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

// A reply cut off mid-object: close any open string and braces.
fn unterminated_tail(text: &str) -> Option<String> {
    let start = text.rfind('{')?;
    let start = text[..=start]
        .char_indices()
        .filter(|&(_, c)| c == '{')
        .map(|(i, _)| i)
        .find(|&i| matching_brace(text.as_bytes(), i).is_none())?;
    let mut tail = text[start..].trim_end().to_string();
    let mut depth = 0i32;
    let mut in_string = false;
    let mut escaped = false;
    for c in tail.chars() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => depth -= 1,
            _ => {}
        }
    }
    if in_string {
        tail.push('"');
    }
    for _ in 0..depth.max(0) {
        tail.push('}');
    }
    Some(tail)
}

/// Best-effort conversion of JSON-ish text into JSON: single-quoted strings,
/// bare keys, Python literals and trailing commas.
fn loosen(src: &str) -> String {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '"' | '\'' => {
                out.push('"');
                i += 1;
                while i < chars.len() && chars[i] != c {
                    match chars[i] {
                        '\\' if i + 1 < chars.len() => {
                            if chars[i + 1] == '\'' {
                                out.push('\'');
                            } else {
                                out.push('\\');
                                out.push(chars[i + 1]);
                            }
                            i += 2;
                            continue;
                        }
                        '"' => out.push_str("\\\""),
                        '\n' => out.push_str("\\n"),
                        other => out.push(other),
                    }
                    i += 1;
                }
                out.push('"');
                i += 1;
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(',');
                }
                i += 1;
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let next = chars[i..].iter().find(|c| !c.is_whitespace());
                match word.as_str() {
                    "True" | "true" => out.push_str("true"),
                    "False" | "false" => out.push_str("false"),
                    "None" | "null" => out.push_str("null"),
                    _ if next == Some(&':') => {
                        out.push('"');
                        out.push_str(&word);
                        out.push('"');
                    }
                    _ => out.push_str(&word),
                }
            }
            other => {
                out.push(other);
                i += 1;
            }
        }
    }
    out
}
