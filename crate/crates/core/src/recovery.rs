//! Deterministic recovery of structured predictions from raw model text.
//!
//! Stages run in a fixed order and the first success wins: the whole text,
//! then the body of its first Markdown fence, then the first balanced
//! bracket span. Nothing is repaired; text that survives none of the stages
//! becomes an invalid, empty prediction.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::schema::{lenient_entries, Annotation, PredictionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryRoute {
    Direct,
    FenceStripped,
    BracketRecovered,
    Failed,
}

impl RecoveryRoute {
    pub const ALL: [Self; 4] = [Self::Direct, Self::FenceStripped, Self::BracketRecovered, Self::Failed];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::FenceStripped => "fence_stripped",
            Self::BracketRecovered => "bracket_recovered",
            Self::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryOutcome {
    pub prediction: PredictionSet,
    pub route: RecoveryRoute,
    /// Results entries skipped because they were not well-formed annotations.
    pub dropped_entries: usize,
}

/// Reads a results list from a parsed document: an object's `results` array
/// or a bare top-level array of objects.
fn read_document(text: &str) -> Option<(Vec<Annotation>, usize)> {
    let value: Value = serde_json::from_str(text).ok()?;
    let entries = match &value {
        Value::Object(map) => map.get("results")?.as_array()?,
        Value::Array(items) if items.iter().all(Value::is_object) => items,
        _ => return None,
    };
    Some(lenient_entries(entries))
}

/// Body of the first fenced block. The opening fence may carry a language
/// tag; a missing closing fence extends the body to the end of the text.
pub fn fenced_body(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let tag = &after[..body_start];
    // An opening fence with inline content (```{"results":...}```) has no tag line.
    let body = if tag.trim().chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-') {
        &after[body_start..]
    } else {
        after
    };
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

/// Byte range of the balanced bracket group opened at `start`, skipping
/// brackets inside JSON strings.
fn balanced_from(text: &str, start: usize) -> Option<&str> {
    let mut stack = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' | '[' => stack.push(c),
            '}' | ']' => {
                let open = stack.pop()?;
                if (open == '{') != (c == '}') {
                    return None;
                }
                if stack.is_empty() {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Candidate spans for bracket recovery: the group opened by the earliest
/// `{` or `[`, then the group opened by the first bracket of the other kind.
pub fn bracket_candidates(text: &str) -> Vec<&str> {
    let mut starts: Vec<usize> = [text.find('{'), text.find('[')].into_iter().flatten().collect();
    starts.sort_unstable();
    starts.into_iter().filter_map(|s| balanced_from(text, s)).collect()
}

pub fn recover(raw: &str, example_id: &str) -> RecoveryOutcome {
    let trimmed = raw.trim();
    let outcome = |route, (annotations, dropped): (Vec<Annotation>, usize)| {
        let prediction = if route == RecoveryRoute::Direct && dropped == 0 {
            PredictionSet::valid(example_id, annotations)
        } else {
            PredictionSet::recovered(example_id, annotations)
        };
        RecoveryOutcome { prediction, route, dropped_entries: dropped }
    };
    if let Some(doc) = read_document(trimmed) {
        return outcome(RecoveryRoute::Direct, doc);
    }
    let body = fenced_body(trimmed);
    if let Some(doc) = body.and_then(|b| read_document(b.trim())) {
        return outcome(RecoveryRoute::FenceStripped, doc);
    }
    let scope = body.unwrap_or(trimmed);
    let mut candidates = bracket_candidates(scope);
    if body.is_some() {
        candidates.extend(bracket_candidates(trimmed));
    }
    for candidate in candidates {
        if let Some(doc) = read_document(candidate) {
            return outcome(RecoveryRoute::BracketRecovered, doc);
        }
    }
    RecoveryOutcome { prediction: PredictionSet::invalid(example_id), route: RecoveryRoute::Failed, dropped_entries: 0 }
}
