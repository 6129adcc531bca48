//! Descriptive statistics over a gold corpus.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ontology::LabelInventory;
use crate::schema::{dedup_annotations, GoldExample};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub count: usize,
    /// Percent of all annotations.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub examples: usize,
    pub annotations: usize,
    pub per_code: BTreeMap<String, Frequency>,
    /// Keyed `Code/Sub-code`.
    pub per_sub_code: BTreeMap<String, Frequency>,
    pub annotations_per_example: Summary,
    pub span_tokens: Summary,
    pub observed_pairs: usize,
    /// Observed pairs absent from the inventory.
    pub out_of_inventory_pairs: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    Summary { mean, median, q1, q3, iqr: q3 - q1 }
}

/// Annotations are deduplicated per example before counting.
pub fn corpus_stats(golds: &[GoldExample], inventory: &LabelInventory) -> CorpusStats {
    let mut codes: BTreeMap<String, usize> = BTreeMap::new();
    let mut subs: BTreeMap<String, usize> = BTreeMap::new();
    let mut pairs = BTreeSet::new();
    let mut per_example = Vec::with_capacity(golds.len());
    let mut span_lengths = Vec::new();
    for g in golds {
        let anns = dedup_annotations(&g.annotations);
        per_example.push(anns.len() as f64);
        for a in &anns {
            let (c, s) = a.pair();
            *codes.entry(c.to_string()).or_default() += 1;
            *subs.entry(format!("{c}/{s}")).or_default() += 1;
            pairs.insert((c.to_string(), s.to_string()));
            span_lengths.push(tokenize(&a.span).len() as f64);
        }
    }
    let total = span_lengths.len();
    let freq = |m: BTreeMap<String, usize>| {
        m.into_iter()
            .map(|(k, count)| (k, Frequency { count, percent: if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 } }))
            .collect()
    };
    CorpusStats {
        examples: golds.len(),
        annotations: total,
        per_code: freq(codes),
        per_sub_code: freq(subs),
        annotations_per_example: summarize(&per_example),
        span_tokens: summarize(&span_lengths),
        observed_pairs: pairs.len(),
        out_of_inventory_pairs: pairs.iter().filter(|(c, s)| !inventory.is_valid_pair(c, s)).count(),
    }
}
