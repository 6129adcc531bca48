//! Tokenization and span-level string matching shared by refinement and scoring.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Normalized tokens with their byte ranges in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    tokens: Vec<String>,
    source_offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Byte range `(start, end)` of each token's surviving characters.
    pub fn source_offsets(&self) -> &[(usize, usize)] {
        &self.source_offsets
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn set(&self) -> BTreeSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}'
                | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{00A1}' | '\u{00B7}'
        )
}

/// Case-folds, splits on Unicode whitespace and strips edge punctuation from each token.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut seq = TokenSequence::default();
    let mut start = None;
    let push = |seq: &mut TokenSequence, s: usize, e: usize| {
        let raw = &text[s..e];
        let lead = raw.len() - raw.trim_start_matches(is_punct).len();
        let core = raw.trim_matches(is_punct);
        if !core.is_empty() {
            seq.tokens.push(core.to_lowercase());
            seq.source_offsets.push((s + lead, s + lead + core.len()));
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                push(&mut seq, s, i);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        push(&mut seq, s, text.len());
    }
    seq
}

/// `(|A ∩ B|, |A ∪ B|)` over token sets.
pub fn jaccard_counts(a: &TokenSequence, b: &TokenSequence) -> (usize, usize) {
    let (sa, sb) = (a.set(), b.set());
    let inter = sa.intersection(&sb).count();
    (inter, sa.len() + sb.len() - inter)
}

/// Token-set Jaccard; two empty sequences score 0.
pub fn jaccard(a: &TokenSequence, b: &TokenSequence) -> f64 {
    match jaccard_counts(a, b) {
        (_, 0) => 0.0,
        (i, u) => i as f64 / u as f64,
    }
}

/// Jaccard of two raw strings after tokenization.
pub fn span_jaccard(a: &str, b: &str) -> f64 {
    jaccard(&tokenize(a), &tokenize(b))
}

/// Collapses whitespace runs to one space and trims; returns the normalized
/// text and, per normalized byte, the byte offset it came from.
fn normalize_ws(text: &str) -> (String, Vec<usize>) {
    let mut out = String::with_capacity(text.len());
    let mut map = Vec::with_capacity(text.len());
    let mut pending_space = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if !out.is_empty() && pending_space.is_none() {
                pending_space = Some(i);
            }
            continue;
        }
        if let Some(sp) = pending_space.take() {
            out.push(' ');
            map.push(sp);
        }
        out.push(c);
        map.extend(std::iter::repeat_n(i, c.len_utf8()));
    }
    (out, map)
}

/// Whitespace-normalized, case-sensitive contiguous-substring test. Empty spans never match.
pub fn is_verbatim(span: &str, context: &str) -> bool {
    find_verbatim(span, context).is_some()
}

/// Byte range in `context` of the first whitespace-normalized occurrence of `span`.
pub fn find_verbatim(span: &str, context: &str) -> Option<(usize, usize)> {
    let (needle, _) = normalize_ws(span);
    if needle.is_empty() {
        return None;
    }
    let (hay, map) = normalize_ws(context);
    let at = hay.find(&needle)?;
    let last = at + needle.len() - 1;
    let end_char = context[map[last]..].chars().next().map_or(0, char::len_utf8);
    Some((map[at], map[last] + end_char))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapResult {
    pub snapped_span: String,
    pub jaccard: f64,
    pub margin: f64,
    pub accepted: bool,
}

impl SnapResult {
    fn rejected(jaccard: f64, margin: f64) -> Self {
        Self { snapped_span: String::new(), jaccard, margin, accepted: false }
    }
}

pub const SNAP_THRESHOLD: f64 = 0.72;
pub const SNAP_MARGIN: f64 = 0.08;

/// Snaps a near-miss span onto the best-matching contiguous token window of
/// `context`.
///
/// Windows span `max(1, L-2)..=L+2` tokens where `L` is the span's token
/// count. The winner is the highest-Jaccard window (ties: earliest start, then
/// length closest to `L`, then shorter). The runner-up is the best window that
/// does not overlap the winner, so shifted or extended copies of the same
/// alignment do not count as competitors. Accepted iff
/// `best >= threshold` and `best - runner_up >= margin`.
pub fn snap_span(span: &str, context: &str, threshold: f64, margin: f64) -> SnapResult {
    let target = tokenize(span);
    let ctx = tokenize(context);
    if target.is_empty() || ctx.is_empty() {
        return SnapResult::rejected(0.0, 0.0);
    }
    let l = target.len();
    let lo = l.saturating_sub(2).max(1);
    let hi = (l + 2).min(ctx.len());
    let target_set = target.set();

    // (start, len, score)
    let mut windows = Vec::new();
    for len in lo..=hi {
        for start in 0..=ctx.len() - len {
            let set: BTreeSet<&str> = ctx.tokens[start..start + len].iter().map(String::as_str).collect();
            let inter = set.intersection(&target_set).count();
            let union = set.len() + target_set.len() - inter;
            windows.push((start, len, inter as f64 / union as f64));
        }
    }
    if windows.is_empty() {
        return SnapResult::rejected(0.0, 0.0);
    }
    let best = *windows
        .iter()
        .min_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then(a.0.cmp(&b.0))
                .then(a.1.abs_diff(l).cmp(&b.1.abs_diff(l)))
                .then(a.1.cmp(&b.1))
        })
        .expect("nonempty");
    let (bs, bl, score) = best;
    let runner_up = windows
        .iter()
        .filter(|&&(s, len, _)| s + len <= bs || s >= bs + bl)
        .map(|w| w.2)
        .fold(0.0, f64::max);
    let gap = score - runner_up;
    if score >= threshold && gap >= margin {
        let begin = ctx.source_offsets[bs].0;
        let end = ctx.source_offsets[bs + bl - 1].1;
        SnapResult { snapped_span: context[begin..end].to_string(), jaccard: score, margin: gap, accepted: true }
    } else {
        SnapResult::rejected(score, gap)
    }
}
