//! Counting oracles over plain string triples. Spans produced by the
//! generators here are lowercase words joined by single spaces, so splitting
//! on whitespace is an exact tokenizer for them.

use std::collections::{BTreeSet, HashMap, HashSet};

use num_rational::Ratio;
use ontex::schema::{Annotation, PredictionSet};
use rand::Rng;

pub type Triple = (String, String, String);

pub const WORDS: [&str; 12] =
    ["pain", "my", "head", "blood", "test", "refill", "please", "today", "nurse", "call", "back", "results"];

pub fn words(span: &str) -> BTreeSet<String> {
    span.split_whitespace().map(str::to_lowercase).collect()
}

/// Exact token Jaccard; two empty spans score 0.
pub fn jaccard(a: &str, b: &str) -> Ratio<i64> {
    let (a, b) = (words(a), words(b));
    let union = a.union(&b).count() as i64;
    if union == 0 {
        return Ratio::from_integer(0);
    }
    Ratio::new(a.intersection(&b).count() as i64, union)
}

pub fn triple(a: &Annotation) -> Triple {
    (a.code.clone(), a.sub_code.clone(), a.span.clone())
}

pub fn triples(p: &PredictionSet) -> Vec<Triple> {
    p.annotations().iter().map(triple).collect()
}

pub fn to_annotations(t: &[Triple]) -> Vec<Annotation> {
    t.iter().map(|(c, s, x)| Annotation::new(c.as_str(), s.as_str(), x.as_str())).collect()
}

pub fn random_span(rng: &mut impl Rng, max_len: usize) -> String {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// A pool of `N <= 7` samples over at most 6 pairs with at most 4 span
/// variants each. Roughly one sample in ten is an invalid parse.
pub fn random_pool(rng: &mut impl Rng) -> Vec<PredictionSet> {
    let n = rng.random_range(1..=7);
    let pairs = rng.random_range(1..=6);
    let variants: Vec<Vec<String>> =
        (0..pairs).map(|_| (0..rng.random_range(1..=4)).map(|_| random_span(rng, 4)).collect()).collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                return PredictionSet::invalid("x");
            }
            let mut anns = Vec::new();
            for (k, vs) in variants.iter().enumerate() {
                if rng.random_bool(0.6) {
                    let span = &vs[rng.random_range(0..vs.len())];
                    anns.push(Annotation::new(format!("C{}", k % 3), format!("S{k}"), span.as_str()));
                }
            }
            if rng.random_bool(0.2) && !anns.is_empty() {
                let dup = anns[rng.random_range(0..anns.len())].clone();
                anns.push(dup);
            }
            PredictionSet::valid("x", anns)
        })
        .collect()
}

/// Pair support counted per sample (distinct), pairs kept at support >= N/2,
/// span = member with the largest mean Jaccard to all members of the pair
/// (its own similarity taken as 1), earliest on ties.
pub fn self_consistency_oracle(samples: &[PredictionSet]) -> Vec<Triple> {
    let n = samples.len() as i64;
    let mut order = Vec::new();
    let mut support: HashMap<(String, String), i64> = HashMap::new();
    let mut members: HashMap<(String, String), Vec<Triple>> = HashMap::new();
    for s in samples {
        let mut seen_triples = HashSet::new();
        let mut seen_pairs = HashSet::new();
        for t in triples(s) {
            if !seen_triples.insert(t.clone()) {
                continue;
            }
            let pair = (t.0.clone(), t.1.clone());
            if !members.contains_key(&pair) {
                order.push(pair.clone());
            }
            if seen_pairs.insert(pair.clone()) {
                *support.entry(pair.clone()).or_default() += 1;
            }
            members.entry(pair).or_default().push(t);
        }
    }
    let mut out = Vec::new();
    for pair in order {
        if 2 * support[&pair] < n {
            continue;
        }
        let m = &members[&pair];
        let mean = |k: usize| -> Ratio<i64> {
            let total: Ratio<i64> =
                (0..m.len()).map(|l| if l == k { Ratio::from_integer(1) } else { jaccard(&m[k].2, &m[l].2) }).sum();
            total / Ratio::from_integer(m.len() as i64)
        };
        let best = (0..m.len()).fold(0, |b, k| if mean(k) > mean(b) { k } else { b });
        out.push(m[best].clone());
    }
    out
}

/// Whitespace-collapsed, case-sensitive substring; empty spans never match.
pub fn verbatim(span: &str, context: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    let s = norm(span);
    !s.is_empty() && norm(context).contains(&s)
}

/// True when the selector should take the self-consistency input.
pub fn selector_prefers_sc(cot: &[Triple], sc: &[Triple], context: &str) -> bool {
    let key = |t: &[Triple]| {
        let v = t.iter().filter(|x| verbatim(&x.2, context)).count();
        let pairs: HashSet<(&str, &str)> = t.iter().map(|x| (x.0.trim(), x.1.trim())).collect();
        (v, pairs.len())
    };
    let (a, b) = (key(cot), key(sc));
    b.0 > a.0 || (b.0 == a.0 && b.1 > a.1)
}
