//! Post-training prediction procedures. Each returns one complete prediction
//! per example together with the stage that produced every kept triplet.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::gateway::{GenerationRequest, Message, TextGenerator};
use crate::ontology::LabelInventory;
use crate::recovery::recover;
use crate::schema::{dedup_annotations, serialize_annotations, Annotation, GoldExample, ParseStatus, PredictionSet};
use crate::text::{is_verbatim, jaccard_counts, snap_span, span_jaccard, tokenize};

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum RefineError {
    #[error("refinement configuration: {0}")]
    InvalidConfig(String),
    #[error("self-consistency needs at least one sample")]
    NoSamples,
    #[error("seed merging needs at least 2 seed predictions, got {0}")]
    TooFewSeeds(usize),
    #[error("reranking needs at least one candidate set")]
    NoCandidates,
}

/// Where a candidate prediction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CandidateSource {
    Greedy,
    CotSr,
    SelfConsistency,
    Seed(usize),
    RefinedSample(usize),
}

impl fmt::Display for CandidateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Greedy => f.write_str("greedy"),
            Self::CotSr => f.write_str("cot_sr"),
            Self::SelfConsistency => f.write_str("self_consistency"),
            Self::Seed(k) => write!(f, "seed_{k}"),
            Self::RefinedSample(k) => write!(f, "refined_sample_{k}"),
        }
    }
}

impl FromStr for CandidateSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let indexed = |prefix: &str| s.strip_prefix(prefix).and_then(|k| k.parse().ok());
        match s {
            "greedy" => Ok(Self::Greedy),
            "cot_sr" => Ok(Self::CotSr),
            "self_consistency" => Ok(Self::SelfConsistency),
            _ => indexed("seed_")
                .map(Self::Seed)
                .or_else(|| indexed("refined_sample_").map(Self::RefinedSample))
                .ok_or_else(|| format!("unknown candidate source {s:?}")),
        }
    }
}

impl Serialize for CandidateSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CandidateSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub source: CandidateSource,
    pub prediction: PredictionSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankWeights {
    pub agree: f64,
    pub verbatim: f64,
    pub snap: f64,
    pub accept_threshold: f64,
}

impl Default for RerankWeights {
    fn default() -> Self {
        Self { agree: 1.0, verbatim: 0.5, snap: 0.25, accept_threshold: 1.0 }
    }
}

/// Prompt text with `{context}`, `{sentence}` and `{previous_json}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub system: String,
    pub extraction: String,
    pub verification: String,
    pub refinement: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: "You annotate patient-provider messages with communication codes. \
                     Answer with JSON of the form {\"results\": [{\"Code\": ..., \"Sub-code\": ..., \"Span\": ...}]}."
                .into(),
            extraction: "Message:\n{context}\n\nSegment to code:\n{sentence}\n\n\
                         List every (Code, Sub-code, Span) annotation for the segment. \
                         Each Span must be copied exactly from the message."
                .into(),
            verification: "Message:\n{context}\n\nSegment:\n{sentence}\n\nDraft annotations:\n{previous_json}\n\n\
                           Verify the draft. Remove annotations whose Span is not supported by the segment \
                           and correct minor Span errors. Return the corrected JSON."
                .into(),
            refinement: "Message:\n{context}\n\nSegment:\n{sentence}\n\nCurrent annotations:\n{previous_json}\n\n\
                         Refine the annotations: fix labels, add missing ones and drop unsupported ones. \
                         Return the full JSON."
                .into(),
        }
    }
}

impl PromptTemplates {
    pub fn render(template: &str, example: &ExampleText, previous_json: &str) -> String {
        template
            .replace("{context}", &example.context)
            .replace("{sentence}", example.segment())
            .replace("{previous_json}", previous_json)
    }

    fn messages(&self, template: &str, example: &ExampleText, previous_json: &str) -> Vec<Message> {
        let mut out = Vec::with_capacity(2);
        if !self.system.is_empty() {
            out.push(Message::system(self.system.clone()));
        }
        out.push(Message::user(Self::render(template, example, previous_json)));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub sc_samples: usize,
    pub sc_temperature: f64,
    pub refine_samples: usize,
    pub cgra_samples: usize,
    pub max_tokens: usize,
    pub span_check_threshold: f64,
    pub hybrid_threshold: f64,
    pub cgra_min_triplets: usize,
    pub snap_threshold: f64,
    pub snap_margin: f64,
    pub merge_threshold: f64,
    pub merge_min_support: usize,
    pub label_match_threshold: f64,
    pub reranker: RerankWeights,
    pub prompts: PromptTemplates,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            sc_samples: 5,
            sc_temperature: 0.7,
            refine_samples: 3,
            cgra_samples: 3,
            max_tokens: 1024,
            span_check_threshold: 0.8,
            hybrid_threshold: 0.5,
            cgra_min_triplets: 4,
            snap_threshold: 0.72,
            snap_margin: 0.08,
            merge_threshold: 0.5,
            merge_min_support: 2,
            label_match_threshold: 0.85,
            reranker: RerankWeights::default(),
            prompts: PromptTemplates::default(),
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let unit = [
            ("span_check_threshold", self.span_check_threshold),
            ("hybrid_threshold", self.hybrid_threshold),
            ("snap_threshold", self.snap_threshold),
            ("snap_margin", self.snap_margin),
            ("merge_threshold", self.merge_threshold),
            ("label_match_threshold", self.label_match_threshold),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(RefineError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        let counts = [
            ("sc_samples", self.sc_samples),
            ("refine_samples", self.refine_samples),
            ("cgra_samples", self.cgra_samples),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(RefineError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.sc_temperature >= 0.0 && self.sc_temperature.is_finite()) {
            return Err(RefineError::InvalidConfig("sc_temperature must be nonnegative".into()));
        }
        let w = &self.reranker;
        if ![w.agree, w.verbatim, w.snap, w.accept_threshold].iter().all(|v| v.is_finite()) {
            return Err(RefineError::InvalidConfig("reranker weights must be finite".into()));
        }
        Ok(())
    }
}

/// Unlabeled example text handed to generation-backed procedures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleText {
    pub example_id: String,
    pub context: String,
    #[serde(default)]
    pub sentence: String,
}

impl ExampleText {
    pub fn segment(&self) -> &str {
        if self.sentence.trim().is_empty() { &self.context } else { &self.sentence }
    }
}

impl From<&GoldExample> for ExampleText {
    fn from(g: &GoldExample) -> Self {
        Self { example_id: g.example_id.clone(), context: g.context.clone(), sentence: g.sentence.clone() }
    }
}

/// A refined prediction; `provenance[i]` names the stage behind annotation `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    pub prediction: PredictionSet,
    pub provenance: Vec<String>,
    pub generation_calls: usize,
}

impl Refinement {
    fn uniform(prediction: PredictionSet, stage: &str, generation_calls: usize) -> Self {
        let provenance = vec![stage.to_string(); prediction.len()];
        Self { prediction, provenance, generation_calls }
    }

    /// Builds from `(annotation, stage)` rows, dropping later duplicates of a triple.
    fn from_rows(template: &PredictionSet, rows: Vec<(Annotation, String)>, generation_calls: usize) -> Self {
        let mut seen = HashSet::new();
        let (annotations, provenance): (Vec<_>, Vec<_>) = rows
            .into_iter()
            .filter(|(a, _)| seen.insert(triple_key(a)))
            .unzip();
        let prediction = match (template.parse_status(), annotations.is_empty()) {
            (ParseStatus::Invalid, true) => template.clone(),
            (ParseStatus::Invalid, false) => PredictionSet::recovered(template.example_id(), annotations),
            _ => template.with_annotations(annotations),
        };
        let provenance = if prediction.is_invalid() { Vec::new() } else { provenance };
        Self { prediction, provenance, generation_calls }
    }
}

fn pair_key(a: &Annotation) -> (String, String) {
    (a.code.trim().to_string(), a.sub_code.trim().to_string())
}

/// Stage-2 grounding check: verbatim in the segment, or token Jaccard with it at or above `threshold`.
pub fn span_supported(span: &str, segment: &str, threshold: f64) -> bool {
    is_verbatim(span, segment) || span_jaccard(span, segment) >= threshold
}

fn supported_count(pred: &PredictionSet, segment: &str, threshold: f64) -> usize {
    pred.annotations().iter().filter(|a| span_supported(&a.span, segment, threshold)).count()
}

fn dedup_set(p: &PredictionSet) -> PredictionSet {
    p.with_annotations(dedup_annotations(p.annotations()))
}

/// Pair voting with mean-Jaccard span choice.
///
/// A pair survives when at least half the samples contain it. Its span is
/// the sampled span with the highest mean Jaccard to every sampled span of
/// the pair, itself counted at similarity 1; ties go to the earliest sample.
/// Means are compared exactly as rationals.
pub fn self_consistency(samples: &[PredictionSet]) -> Result<Refinement, RefineError> {
    let first = samples.first().ok_or(RefineError::NoSamples)?;
    let n = samples.len();
    let deduped: Vec<PredictionSet> = samples.iter().map(dedup_set).collect();

    let mut order: Vec<(String, String)> = Vec::new();
    let mut members: HashMap<(String, String), Vec<&Annotation>> = HashMap::new();
    let mut support: HashMap<(String, String), usize> = HashMap::new();
    for s in &deduped {
        let mut in_sample = HashSet::new();
        for a in s.annotations() {
            let key = pair_key(a);
            if !members.contains_key(&key) {
                order.push(key.clone());
            }
            members.entry(key.clone()).or_default().push(a);
            if in_sample.insert(key.clone()) {
                *support.entry(key).or_default() += 1;
            }
        }
    }

    let mut rows = Vec::new();
    for key in order {
        if support[&key] * 2 < n {
            continue;
        }
        let spans = &members[&key];
        let tokens: Vec<_> = spans.iter().map(|a| tokenize(&a.span)).collect();
        let score = |k: usize| -> BigRational {
            let mut total = BigRational::from_integer(BigInt::from(1));
            for (l, other) in tokens.iter().enumerate() {
                if l != k {
                    let (i, u) = jaccard_counts(&tokens[k], other);
                    if u > 0 {
                        total += BigRational::new(BigInt::from(i), BigInt::from(u));
                    }
                }
            }
            total
        };
        let mut best = 0;
        let mut best_score = score(0);
        for k in 1..spans.len() {
            let s = score(k);
            if s > best_score {
                best = k;
                best_score = s;
            }
        }
        rows.push((spans[best].clone(), "self_consistency".to_string()));
    }

    let template = if deduped.iter().all(PredictionSet::is_invalid) {
        PredictionSet::invalid(first.example_id())
    } else {
        PredictionSet::valid(first.example_id(), Vec::new())
    };
    Ok(Refinement::from_rows(&template, rows, 0))
}

/// Keeps every greedy span; relabels it from the best-overlapping
/// self-consistency triplet when that overlap reaches `threshold`; then
/// appends self-consistency triplets whose pair is still absent.
pub fn hybrid_mild(greedy: &PredictionSet, sc: &PredictionSet, threshold: f64) -> Refinement {
    let mut rows: Vec<(Annotation, String)> = Vec::new();
    for g in greedy.annotations() {
        let g_tokens = tokenize(&g.span);
        let mut best: Option<(&Annotation, f64)> = None;
        for s in sc.annotations() {
            let j = crate::text::jaccard(&g_tokens, &tokenize(&s.span));
            if best.is_none_or(|(_, b)| j > b) {
                best = Some((s, j));
            }
        }
        match best {
            Some((s, j)) if j >= threshold && pair_key(s) != pair_key(g) => {
                rows.push((Annotation { code: s.code.clone(), sub_code: s.sub_code.clone(), span: g.span.clone() }, "hybrid_relabeled".into()));
            }
            _ => rows.push((g.clone(), "greedy".into())),
        }
    }
    let mut pairs: HashSet<(String, String)> = rows.iter().map(|(a, _)| pair_key(a)).collect();
    for s in sc.annotations() {
        if pairs.insert(pair_key(s)) {
            rows.push((s.clone(), "self_consistency".into()));
        }
    }
    let template = if greedy.is_invalid() { sc } else { greedy };
    Refinement::from_rows(template, rows, 0)
}

fn verbatim_count(pred: &PredictionSet, context: &str) -> usize {
    pred.annotations().iter().filter(|a| is_verbatim(&a.span, context)).count()
}

fn distinct_pairs(pred: &PredictionSet) -> usize {
    pred.annotations().iter().map(pair_key).collect::<HashSet<_>>().len()
}

/// Picks the input with more context-verbatim spans, then more distinct
/// pairs; remaining ties keep `cot`.
pub fn selector(cot: &PredictionSet, sc: &PredictionSet, context: &str) -> Refinement {
    let key = |p: &PredictionSet| (verbatim_count(p, context), distinct_pairs(p));
    if key(sc) > key(cot) {
        Refinement::uniform(sc.clone(), "self_consistency", 0)
    } else {
        Refinement::uniform(cot.clone(), "cot_sr", 0)
    }
}

/// Decodes every sampled text; failed recoveries become invalid (empty) sets.
fn decode_all(texts: &[String], example_id: &str) -> Vec<PredictionSet> {
    texts.iter().map(|t| dedup_set(&recover(t, example_id).prediction)).collect()
}

/// Samples `cfg.sc_samples` extractions and votes over them.
pub fn self_consistency_generate(
    example: &ExampleText,
    client: &dyn TextGenerator,
    cfg: &RefinementConfig,
    seed: Option<u64>,
) -> Result<Refinement, RefineError> {
    cfg.validate()?;
    let p = &cfg.prompts;
    let mut req =
        GenerationRequest::sampled(p.messages(&p.extraction, example, ""), cfg.sc_temperature, cfg.sc_samples, cfg.max_tokens);
    req.seed = seed;
    match client.generate(&req) {
        Ok(resp) => {
            let mut r = self_consistency(&decode_all(&resp.texts, &example.example_id))?;
            r.generation_calls = 1;
            Ok(r)
        }
        Err(e) => {
            log::warn!("{}: self-consistency sampling failed: {e}", example.example_id);
            Ok(Refinement::uniform(PredictionSet::invalid(example.example_id.clone()), "failed", 1))
        }
    }
}

/// Adds verbatim-grounded triplets from extra samples when the baseline has
/// fewer than `cfg.cgra_min_triplets` distinct triplets. Baseline triplets are
/// never altered.
pub fn cgra(
    greedy: &PredictionSet,
    context: &str,
    example: &ExampleText,
    client: &dyn TextGenerator,
    cfg: &RefinementConfig,
    seed: Option<u64>,
) -> Result<Refinement, RefineError> {
    cfg.validate()?;
    let base = dedup_set(greedy);
    let base_rows: Vec<(Annotation, String)> = base.annotations().iter().map(|a| (a.clone(), "greedy".to_string())).collect();
    if base.len() >= cfg.cgra_min_triplets {
        return Ok(Refinement::from_rows(&base, base_rows, 0));
    }
    let p = &cfg.prompts;
    let mut req =
        GenerationRequest::sampled(p.messages(&p.extraction, example, ""), cfg.sc_temperature, cfg.cgra_samples, cfg.max_tokens);
    req.seed = seed;
    let resp = match client.generate(&req) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{}: coverage resampling failed: {e}", example.example_id);
            return Ok(Refinement::from_rows(&base, base_rows, 1));
        }
    };
    let mut rows = base_rows;
    for sample in decode_all(&resp.texts, &example.example_id) {
        for a in sample.annotations() {
            if is_verbatim(&a.span, context) {
                rows.push((a.clone(), "cgra_added".to_string()));
            }
        }
    }
    Ok(Refinement::from_rows(&base, rows, 1))
}

/// Strict-majority triplet vote over refinement samples. Surviving variants
/// of one pair whose spans overlap at Jaccard >= 0.5 collapse to one: the
/// most frequent, then a context-verbatim span, then the smallest string.
pub fn majority_triplets(samples: &[PredictionSet], context: &str) -> Vec<Annotation> {
    let r = samples.len();
    let mut order: Vec<Annotation> = Vec::new();
    let mut counts: HashMap<(String, String, String), usize> = HashMap::new();
    for s in samples {
        for a in dedup_annotations(s.annotations()) {
            let count = counts.entry(triple_key(&a)).or_default();
            if *count == 0 {
                order.push(a);
            }
            *count += 1;
        }
    }
    let count = |a: &Annotation| counts[&triple_key(a)];
    let survivors: Vec<&Annotation> = order.iter().filter(|a| count(a) * 2 > r).collect();

    let mut links = UnionFind::new(survivors.len());
    for i in 0..survivors.len() {
        for j in i + 1..survivors.len() {
            let (x, y) = (survivors[i], survivors[j]);
            if pair_key(x) == pair_key(y) && span_jaccard(&x.span, &y.span) >= 0.5 {
                links.union(i, j);
            }
        }
    }
    links
        .groups()
        .into_iter()
        .map(|group| {
            let winner = group
                .into_iter()
                .map(|k| survivors[k])
                .min_by(|x, y| {
                    count(y)
                        .cmp(&count(x))
                        .then(is_verbatim(&y.span, context).cmp(&is_verbatim(&x.span, context)))
                        .then(x.span.trim().cmp(y.span.trim()))
                })
                .expect("groups are nonempty");
            winner.clone()
        })
        .collect()
}

fn triple_key(a: &Annotation) -> (String, String, String) {
    (a.code.trim().to_string(), a.sub_code.trim().to_string(), a.span.trim().to_string())
}

/// Disjoint sets over `0..n`; the root of a set is its smallest member.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.find(i), self.find(j));
        self.parent[ri.max(rj)] = ri.min(rj);
    }

    /// Members of each set, sets ordered by smallest member.
    fn groups(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); self.parent.len()];
        for i in 0..self.parent.len() {
            let r = self.find(i);
            by_root[r].push(i);
        }
        by_root.into_iter().filter(|g| !g.is_empty()).collect()
    }
}

/// Greedy extraction, span verification, voted self-refinement, then the
/// better-grounded of the verified and refined sets (ties keep verified).
pub fn cot_sr(
    example: &ExampleText,
    client: &dyn TextGenerator,
    cfg: &RefinementConfig,
    seed: Option<u64>,
) -> Result<Refinement, RefineError> {
    cfg.validate()?;
    let p = &cfg.prompts;
    let id = example.example_id.as_str();
    let segment = example.segment();
    let mut calls = 0;

    calls += 1;
    let greedy_req = GenerationRequest::greedy(p.messages(&p.extraction, example, ""), cfg.max_tokens);
    let stage1 = match client.generate(&greedy_req) {
        Ok(resp) => dedup_set(&recover(&resp.texts[0], id).prediction),
        Err(e) => {
            log::warn!("{id}: greedy generation failed: {e}");
            return Ok(Refinement::uniform(PredictionSet::invalid(id), "failed", calls));
        }
    };

    let all_supported = stage1.annotations().iter().all(|a| span_supported(&a.span, segment, cfg.span_check_threshold));
    let (verified, verified_stage) = if all_supported {
        (stage1, "greedy")
    } else {
        calls += 1;
        let previous = serialize_annotations(stage1.annotations());
        let req = GenerationRequest::greedy(p.messages(&p.verification, example, &previous), cfg.max_tokens);
        match client.generate(&req).map(|r| recover(&r.texts[0], id)) {
            Ok(out) if !out.prediction.is_invalid() => (dedup_set(&out.prediction), "verified"),
            Ok(_) => (stage1, "greedy"),
            Err(e) => {
                log::warn!("{id}: verification failed: {e}");
                (stage1, "greedy")
            }
        }
    };

    calls += 1;
    let previous = serialize_annotations(verified.annotations());
    let mut req = GenerationRequest::sampled(
        p.messages(&p.refinement, example, &previous),
        cfg.sc_temperature,
        cfg.refine_samples,
        cfg.max_tokens,
    );
    req.seed = seed;
    let samples = match client.generate(&req) {
        Ok(resp) => decode_all(&resp.texts, id),
        Err(e) => {
            log::warn!("{id}: refinement sampling failed: {e}");
            return Ok(Refinement::uniform(verified, verified_stage, calls));
        }
    };
    let refined_anns = majority_triplets(&samples, &example.context);
    let refined = if verified.is_invalid() {
        PredictionSet::recovered(id, refined_anns)
    } else {
        verified.with_annotations(refined_anns)
    };
    let threshold = cfg.span_check_threshold;
    if supported_count(&refined, segment, threshold) > supported_count(&verified, segment, threshold) {
        Ok(Refinement::uniform(refined, "refined", calls))
    } else {
        Ok(Refinement::uniform(verified, verified_stage, calls))
    }
}

/// Triplets agreed on by several seed models: within a pair, spans chain
/// into groups at Jaccard >= `cfg.merge_threshold`; groups backed by at least
/// `cfg.merge_min_support` distinct seeds keep their longest span (ties: lowest seed).
pub fn seed_merge(seeds: &[PredictionSet], cfg: &RefinementConfig) -> Result<Refinement, RefineError> {
    if seeds.len() < 2 {
        return Err(RefineError::TooFewSeeds(seeds.len()));
    }
    let mut pool: Vec<(usize, Annotation)> = Vec::new();
    for (k, s) in seeds.iter().enumerate() {
        pool.extend(dedup_annotations(s.annotations()).into_iter().map(|a| (k, a)));
    }
    let tokens: Vec<_> = pool.iter().map(|(_, a)| tokenize(&a.span)).collect();
    let mut links = UnionFind::new(pool.len());
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            if pair_key(&pool[i].1) == pair_key(&pool[j].1)
                && crate::text::jaccard(&tokens[i], &tokens[j]) >= cfg.merge_threshold
            {
                links.union(i, j);
            }
        }
    }
    let mut rows = Vec::new();
    for group in links.groups() {
        let support: BTreeSet<usize> = group.iter().map(|&k| pool[k].0).collect();
        if support.len() < cfg.merge_min_support {
            continue;
        }
        // Longest span; among equals the earliest pool entry, i.e. the lowest seed.
        let rep = group
            .iter()
            .copied()
            .max_by(|&x, &y| pool[x].1.span.chars().count().cmp(&pool[y].1.span.chars().count()).then(y.cmp(&x)))
            .expect("groups are nonempty");
        let seeds_label = support.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        rows.push((pool[rep].1.clone(), format!("seed_merge[{seeds_label}]")));
    }
    let template = PredictionSet::valid(seeds[0].example_id(), Vec::new());
    Ok(Refinement::from_rows(&template, rows, 0))
}

/// Maps a predicted code / sub-code onto the inventory: case-insensitive
/// exact match first, then the most similar label by normalized edit
/// similarity at or above `threshold` (ties: inventory order). Sub-codes are
/// searched only under the resolved parent.
pub fn normalize_labels(a: &Annotation, inventory: &LabelInventory, threshold: f64) -> Option<(String, String)> {
    fn best<'a>(query: &str, options: impl Iterator<Item = &'a str>, threshold: f64) -> Option<&'a str> {
        let q = query.trim().to_lowercase();
        let options: Vec<&str> = options.collect();
        if let Some(exact) = options.iter().find(|o| o.to_lowercase() == q) {
            return Some(exact);
        }
        let mut found: Option<(&str, f64)> = None;
        for o in options {
            let sim = strsim::normalized_levenshtein(&q, &o.to_lowercase());
            if sim >= threshold && found.is_none_or(|(_, s)| sim > s) {
                found = Some((o, sim));
            }
        }
        found.map(|(o, _)| o)
    }
    let code = best(&a.code, inventory.codes().map(|l| l.id.as_str()), threshold)?;
    let sub = best(&a.sub_code, inventory.children_of(code), threshold)?;
    Some((code.to_string(), sub.to_string()))
}

/// Pools candidate triplets, grounds them in `context` (verbatim or snapped)
/// and keeps those whose weighted source agreement clears the threshold.
pub fn span_anchored_rerank(
    candidates: &[CandidateSet],
    inventory: &LabelInventory,
    context: &str,
    cfg: &RefinementConfig,
) -> Result<Refinement, RefineError> {
    cfg.validate()?;
    let first = candidates.first().ok_or(RefineError::NoCandidates)?;

    struct Grounded {
        source: usize,
        annotation: Annotation,
        verbatim: bool,
    }
    let mut pool = Vec::new();
    for (source, c) in candidates.iter().enumerate() {
        for a in c.prediction.annotations() {
            let Some((code, sub_code)) = normalize_labels(a, inventory, cfg.label_match_threshold) else { continue };
            let (span, verbatim) = if is_verbatim(&a.span, context) {
                (a.span.trim().to_string(), true)
            } else {
                let snap = snap_span(&a.span, context, cfg.snap_threshold, cfg.snap_margin);
                if !snap.accepted {
                    continue;
                }
                (snap.snapped_span, false)
            };
            pool.push(Grounded { source, annotation: Annotation { code, sub_code, span }, verbatim });
        }
    }

    let tokens: Vec<_> = pool.iter().map(|g| tokenize(&g.annotation.span)).collect();
    let w = cfg.reranker;
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, g) in pool.iter().enumerate() {
        let key = g.annotation.key();
        if !seen.insert(key) {
            continue;
        }
        let members = pool.iter().filter(|o| o.annotation.key() == key);
        let any_verbatim = members.clone().any(|o| o.verbatim);
        let agreeing: BTreeSet<usize> = pool
            .iter()
            .enumerate()
            .filter(|(k, o)| {
                pair_key(&o.annotation) == pair_key(&g.annotation)
                    && crate::text::jaccard(&tokens[i], &tokens[*k]) >= cfg.merge_threshold
            })
            .map(|(_, o)| o.source)
            .collect();
        let score = w.agree * agreeing.len() as f64 + if any_verbatim { w.verbatim } else { -w.snap };
        if score >= w.accept_threshold {
            let tags: Vec<String> = agreeing.iter().map(|&s| candidates[s].source.to_string()).collect();
            let how = if any_verbatim { "verbatim" } else { "snapped" };
            rows.push((g.annotation.clone(), format!("rerank[{}]:{how}", tags.join(","))));
        }
    }
    let template = PredictionSet::valid(first.prediction.example_id(), Vec::new());
    Ok(Refinement::from_rows(&template, rows, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, RetryPolicy, ScriptRule, ScriptedTransport};
    use crate::ontology::{Label, LabelKind};

    fn a(c: &str, s: &str, span: &str) -> Annotation {
        Annotation::new(c, s, span)
    }

    fn set(anns: Vec<Annotation>) -> PredictionSet {
        PredictionSet::valid("e", anns)
    }

    fn doc(anns: &[Annotation]) -> String {
        serialize_annotations(anns)
    }

    fn gateway(rules: Vec<ScriptRule>) -> Gateway<ScriptedTransport> {
        Gateway::new(ScriptedTransport::new(rules), RetryPolicy { max_attempts: 1, base_delay: std::time::Duration::ZERO }, 2)
    }

    fn rule(contains: &str, texts: Vec<String>) -> ScriptRule {
        ScriptRule { contains: contains.into(), texts }
    }

    fn example(context: &str) -> ExampleText {
        ExampleText { example_id: "e".into(), context: context.into(), sentence: String::new() }
    }

    #[test]
    fn source_tags_roundtrip() {
        for s in [CandidateSource::Greedy, CandidateSource::CotSr, CandidateSource::Seed(3), CandidateSource::RefinedSample(0)] {
            assert_eq!(s.to_string().parse::<CandidateSource>().unwrap(), s);
        }
        assert!("seed_x".parse::<CandidateSource>().is_err());
    }

    #[test]
    fn sc_single_sample_is_identity_after_dedup() {
        let s = set(vec![a("A", "x", "s t"), a("A", "x", "s t"), a("B", "y", "u")]);
        let r = self_consistency(&[s]).unwrap();
        assert_eq!(r.prediction.annotations(), &[a("A", "x", "s t"), a("B", "y", "u")]);
    }

    #[test]
    fn sc_half_vote_and_mean_jaccard() {
        let samples = vec![
            set(vec![a("A", "x", "blood test")]),
            set(vec![a("A", "x", "the blood test")]),
            set(vec![a("A", "x", "blood test")]),
            set(vec![a("B", "y", "refill")]),
        ];
        let r = self_consistency(&samples).unwrap();
        assert_eq!(r.prediction.annotations(), &[a("A", "x", "blood test")]);
        let both = set(vec![a("A", "x", "blood test"), a("B", "y", "refill")]);
        let two_of_four = vec![samples[0].clone(), both, samples[3].clone(), set(vec![])];
        let r = self_consistency(&two_of_four).unwrap();
        assert_eq!(r.prediction.len(), 2);
    }

    #[test]
    fn hybrid_rules() {
        let g = set(vec![a("A", "x", "my head hurts")]);
        assert_eq!(hybrid_mild(&g, &set(vec![]), 0.5).prediction, g);
        let sc = set(vec![a("B", "y", "my head hurts"), a("C", "z", "refill")]);
        let r = hybrid_mild(&g, &sc, 0.5);
        assert_eq!(r.prediction.annotations(), &[a("B", "y", "my head hurts"), a("C", "z", "refill")]);
        assert_eq!(r.provenance, ["hybrid_relabeled", "self_consistency"]);
        let far = set(vec![a("B", "y", "totally different words")]);
        let r = hybrid_mild(&g, &far, 0.5);
        assert_eq!(r.prediction.annotations()[0], g.annotations()[0]);
    }

    #[test]
    fn selector_rules() {
        let ctx = "alpha beta gamma delta";
        let cot = set(vec![a("A", "x", "alpha"), a("A", "x", "beta"), a("A", "x", "gamma")]);
        let sc = set(vec![a("A", "x", "alpha")]);
        assert_eq!(selector(&cot, &sc, ctx).prediction, cot);
        let cot = set(vec![a("A", "x", "alpha"), a("A", "x", "beta")]);
        let sc = set(vec![a("A", "x", "alpha"), a("B", "y", "beta")]);
        assert_eq!(selector(&cot, &sc, ctx).prediction, sc);
        assert_eq!(selector(&cot, &cot.clone(), ctx).prediction, cot);
    }

    #[test]
    fn cgra_trigger_and_additions() {
        let ctx = "Please refill my inhaler and book a visit";
        let ex = example(ctx);
        let cfg = RefinementConfig::default();
        let big = set((0..5).map(|i| a("A", "x", &format!("s{i}"))).collect());
        let gw = gateway(vec![rule("", vec![doc(&[])])]);
        let r = cgra(&big, ctx, &ex, &gw, &cfg, None).unwrap();
        assert_eq!((r.prediction, gw.transport().calls()), (big, 0));

        let base = set(vec![a("A", "x", "refill my inhaler"), a("B", "y", "book a visit")]);
        let sampled = doc(&[a("A", "x", "refill my inhaler"), a("C", "z", "book a visit"), a("D", "w", "call me back")]);
        let gw = gateway(vec![rule("", vec![sampled])]);
        let r = cgra(&base, ctx, &ex, &gw, &cfg, None).unwrap();
        assert_eq!(r.prediction.len(), 3);
        assert_eq!(r.prediction.annotations()[2], a("C", "z", "book a visit"));
        assert_eq!(r.provenance[2], "cgra_added");
    }

    #[test]
    fn majority_vote_strict() {
        let ctx = "my blood test results";
        let t = a("A", "x", "blood test");
        let u = a("B", "y", "results");
        let samples = vec![set(vec![t.clone(), u.clone()]), set(vec![t.clone()]), set(vec![])];
        assert_eq!(majority_triplets(&samples, ctx), vec![t.clone()]);
        let even = vec![set(vec![t.clone()]), set(vec![])];
        assert!(majority_triplets(&even, ctx).is_empty());
    }

    #[test]
    fn majority_variants_prefer_verbatim_then_smallest() {
        let ctx = "my blood test results";
        let v = a("A", "x", "blood test results");
        let nv = a("A", "x", "blood tes results");
        let samples = vec![set(vec![v.clone(), nv.clone()]), set(vec![nv.clone(), v.clone()])];
        assert_eq!(majority_triplets(&samples, ctx), vec![v]);
    }

    #[test]
    fn cot_sr_clean_path_skips_verification() {
        let ctx = "I need a refill of my inhaler";
        let greedy = doc(&[a("A", "x", "refill of my inhaler")]);
        let gw = gateway(vec![rule("Refine", vec![doc(&[])]), rule("", vec![greedy])]);
        let r = cot_sr(&example(ctx), &gw, &RefinementConfig::default(), None).unwrap();
        assert_eq!(r.prediction.annotations(), &[a("A", "x", "refill of my inhaler")]);
        assert_eq!(r.generation_calls, 2);
    }

    #[test]
    fn cot_sr_stage4_prefers_better_grounded_refinement() {
        let ctx = "refill my inhaler please and call me back today";
        let greedy = doc(&[a("A", "x", "refill my inhaler"), a("B", "y", "call me back")]);
        let refined = doc(&[a("A", "x", "refill my inhaler"), a("B", "y", "call me back"), a("C", "z", "today")]);
        let gw = gateway(vec![rule("Refine", vec![refined]), rule("", vec![greedy])]);
        let r = cot_sr(&example(ctx), &gw, &RefinementConfig::default(), None).unwrap();
        assert_eq!(r.prediction.len(), 3);
        assert!(r.provenance.iter().all(|p| p == "refined"));
    }

    #[test]
    fn seed_merge_support_and_longest_span() {
        let cfg = RefinementConfig::default();
        assert_eq!(seed_merge(&[set(vec![])], &cfg), Err(RefineError::TooFewSeeds(1)));
        let s1 = set(vec![a("A", "x", "test results ok"), a("B", "y", "only here")]);
        let s2 = set(vec![a("A", "x", "the test results ok now")]);
        let r = seed_merge(&[s1, s2], &cfg).unwrap();
        assert_eq!(r.prediction.annotations(), &[a("A", "x", "the test results ok now")]);
    }

    fn inventory() -> LabelInventory {
        let code = |id: &str| Label { kind: LabelKind::Code, id: id.into(), parent: None, description: String::new() };
        let sub = |id: &str, p: &str| Label { kind: LabelKind::SubCode, id: id.into(), parent: Some(p.into()), description: String::new() };
        LabelInventory::new(vec![code("InfoGive"), code("InfoSeek"), sub("Symptoms", "InfoGive"), sub("Medication", "InfoSeek")]).unwrap()
    }

    #[test]
    fn label_normalization() {
        let inv = inventory();
        assert_eq!(normalize_labels(&a("InfoGve", "symptoms", "s"), &inv, 0.85), Some(("InfoGive".into(), "Symptoms".into())));
        assert_eq!(normalize_labels(&a("infoseek", "Medication", "s"), &inv, 0.85), Some(("InfoSeek".into(), "Medication".into())));
        assert_eq!(normalize_labels(&a("InfoGive", "Medication", "s"), &inv, 0.85), None);
        assert_eq!(normalize_labels(&a("Greeting", "Symptoms", "s"), &inv, 0.85), None);
    }

    #[test]
    fn rerank_scoring() {
        let inv = inventory();
        let ctx = "my head hurts since monday and I need my pills";
        let cfg = RefinementConfig::default();
        let cand = |source, anns| CandidateSet { source, prediction: set(anns) };
        let t = a("InfoGive", "Symptoms", "my head hurts");
        let r = span_anchored_rerank(
            &[cand(CandidateSource::Greedy, vec![t.clone()]), cand(CandidateSource::CotSr, vec![t.clone()])],
            &inv,
            ctx,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.prediction.annotations(), std::slice::from_ref(&t));
        let junk = a("InfoSeek", "Medication", "completely unrelated words here");
        let r = span_anchored_rerank(&[cand(CandidateSource::Greedy, vec![junk])], &inv, ctx, &cfg).unwrap();
        assert!(r.prediction.is_empty());
        let near = a("InfoSeek", "Medication", "I need my pills today");
        let r = span_anchored_rerank(&[cand(CandidateSource::Greedy, vec![near.clone()])], &inv, ctx, &cfg).unwrap();
        assert!(r.prediction.is_empty(), "one source with a snapped span scores 0.75");
        let r = span_anchored_rerank(
            &[cand(CandidateSource::Greedy, vec![near.clone()]), cand(CandidateSource::Seed(1), vec![near])],
            &inv,
            ctx,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.prediction.annotations(), &[a("InfoSeek", "Medication", "I need my pills")]);
    }
}
