//! Synthetic preference pairs: the gold prediction against one corrupted copy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ontology::LabelInventory;
use crate::schema::{dedup_annotations, serialize_annotations, Annotation, GoldExample};
use crate::text::find_verbatim;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum PreferenceError {
    #[error("example {0} has no annotations")]
    EmptyExample(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Deletion,
    Substitution,
    SpanPerturbation,
}

impl CorruptionKind {
    pub const ALL: [Self; 3] = [Self::Deletion, Self::Substitution, Self::SpanPerturbation];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub example_id: String,
    pub context: String,
    pub chosen: String,
    pub rejected: String,
    pub corruption_kind: CorruptionKind,
}

/// Applies `kind` to the annotation at `index`. `None` when the kind does not
/// apply to it: a parent without another sub-code, or a single-token span
/// with no neighbouring context token.
pub fn corrupt(
    annotations: &[Annotation],
    index: usize,
    kind: CorruptionKind,
    context: &str,
    inventory: &LabelInventory,
    rng: &mut impl Rng,
) -> Option<Vec<Annotation>> {
    let mut out = annotations.to_vec();
    let target = &annotations[index];
    match kind {
        CorruptionKind::Deletion => {
            out.remove(index);
        }
        CorruptionKind::Substitution => {
            let (code, sub) = target.pair();
            let siblings: Vec<&str> = inventory.children_of(code).filter(|s| *s != sub).collect();
            if siblings.is_empty() {
                return None;
            }
            out[index].sub_code = siblings[rng.random_range(0..siblings.len())].to_string();
        }
        CorruptionKind::SpanPerturbation => {
            out[index].span = perturb_span(&target.span, context, rng)?;
        }
    }
    Some(out)
}

/// Drops the first or last whitespace token; a single-token span instead
/// takes in the following context token, or the preceding one at the end.
fn perturb_span(span: &str, context: &str, rng: &mut impl Rng) -> Option<String> {
    let words: Vec<&str> = span.split_whitespace().collect();
    if words.len() >= 2 {
        let kept = if rng.random_bool(0.5) { &words[1..] } else { &words[..words.len() - 1] };
        return Some(kept.join(" "));
    }
    let (start, end) = find_verbatim(span, context)?;
    let after = &context[end..];
    let next_end = after
        .char_indices()
        .skip_while(|(_, c)| c.is_whitespace())
        .find(|(_, c)| c.is_whitespace())
        .map_or(after.len(), |(i, _)| i);
    if !after[..next_end].trim().is_empty() {
        return Some(context[start..end + next_end].to_string());
    }
    let before = context[..start].trim_end();
    let prev_start = before.rfind(char::is_whitespace).map_or(0, |i| i + 1);
    if before.is_empty() {
        return None;
    }
    Some(context[prev_start..end].to_string())
}

/// One pair per example from a single seeded stream, consumed in file order.
pub fn generate_preference_pairs(
    golds: &[GoldExample],
    inventory: &LabelInventory,
    seed: u64,
) -> Result<Vec<PreferencePair>, PreferenceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    golds.iter().map(|g| preference_pair(g, inventory, &mut rng)).collect()
}

pub fn preference_pair(
    gold: &GoldExample,
    inventory: &LabelInventory,
    rng: &mut impl Rng,
) -> Result<PreferencePair, PreferenceError> {
    let annotations = dedup_annotations(&gold.annotations);
    if annotations.is_empty() {
        return Err(PreferenceError::EmptyExample(gold.example_id.clone()));
    }
    let chosen = serialize_annotations(&annotations);
    // Deletion always applies, so the redraw loop terminates.
    loop {
        let kind = CorruptionKind::ALL[rng.random_range(0..3)];
        let index = rng.random_range(0..annotations.len());
        let Some(corrupted) = corrupt(&annotations, index, kind, &gold.context, inventory, rng) else {
            continue;
        };
        let rejected = serialize_annotations(&corrupted);
        if rejected != chosen {
            return Ok(PreferencePair {
                example_id: gold.example_id.clone(),
                context: gold.context.clone(),
                chosen,
                rejected,
                corruption_kind: kind,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_span_extends() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb_span("pain", "I have pain  today.", &mut rng).as_deref(), Some("pain  today."));
        assert_eq!(perturb_span("today.", "I have pain today.", &mut rng).as_deref(), Some("pain today."));
        assert_eq!(perturb_span("alone", "alone", &mut rng), None);
    }

    #[test]
    fn multi_token_span_loses_an_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = perturb_span("a b c", "a b c", &mut rng).unwrap();
            assert!(s == "b c" || s == "a b");
        }
    }
}
