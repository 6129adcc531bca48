//! Micro-averaged extraction scores over greedy one-to-one alignments, the
//! error taxonomy and schema diagnostics.
//!
//! Every level aligns predictions to gold independently, using the same
//! global ranking of candidate pairs restricted to that level's eligible
//! pairs. Because pair-eligible candidates rank ahead of all others and, among
//! themselves, by span overlap, the level counts satisfy
//! `triplet <= pair <= min(code, sub_code)` on every input.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::ontology::LabelInventory;
use crate::recovery::{recover, RecoveryRoute};
use crate::schema::{dedup_annotations, Annotation, GoldExample, LabelCheck, PredictionSet, RawOutput};
use crate::text::{jaccard, tokenize, TokenSequence};

pub const SPAN_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction for {0} has no gold example")]
    MissingGold(String),
    #[error("duplicate prediction for {0}")]
    DuplicatePrediction(String),
    #[error("span threshold must lie in [0, 1]")]
    InvalidThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLevel {
    Code,
    SubCode,
    Span,
    Pair,
    Triplet,
}

impl MatchLevel {
    pub const ALL: [Self; 5] = [Self::Code, Self::SubCode, Self::Span, Self::Pair, Self::Triplet];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Code => "code",
            Self::SubCode => "sub_code",
            Self::Span => "span",
            Self::Pair => "pair",
            Self::Triplet => "triplet",
        }
    }

    pub fn admits(self, f: &PairFlags, span_threshold: f64) -> bool {
        match self {
            Self::Code => f.code,
            Self::SubCode => f.sub_code,
            Self::Span => f.jaccard >= span_threshold,
            Self::Pair => f.pair,
            Self::Triplet => f.pair && f.jaccard >= span_threshold,
        }
    }
}

/// Agreement between one prediction and one gold annotation. Labels outside
/// the inventory never agree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFlags {
    pub code: bool,
    pub sub_code: bool,
    pub pair: bool,
    pub jaccard: f64,
}

impl PairFlags {
    pub fn is_zero(&self) -> bool {
        !self.code && !self.sub_code && self.jaccard == 0.0
    }
}

struct Side<'a> {
    annotation: &'a Annotation,
    tokens: TokenSequence,
    check: Option<LabelCheck>,
}

impl<'a> Side<'a> {
    fn new(annotation: &'a Annotation, inventory: Option<&LabelInventory>) -> Self {
        Self { annotation, tokens: tokenize(&annotation.span), check: inventory.map(|inv| LabelCheck::of(annotation, inv)) }
    }
}

fn flags(p: &Side<'_>, g: &Side<'_>) -> PairFlags {
    let (pc, ps) = p.annotation.pair();
    let (gc, gs) = g.annotation.pair();
    let code = pc == gc && p.check.is_none_or(|c| c.code_known);
    let sub_code = ps == gs && p.check.is_none_or(|c| c.sub_code_known);
    PairFlags { code, sub_code, pair: code && sub_code, jaccard: jaccard(&p.tokens, &g.tokens) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub gold: usize,
    pub flags: PairFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub matched: Vec<Match>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gold: Vec<usize>,
}

/// All candidate pairs, best first: pair, code and sub-code agreement, then
/// span Jaccard, each descending; then the prediction's and the gold's
/// trimmed triple, then indices. Over deduplicated inputs the order depends
/// only on content, so scores ignore list order.
fn ranked_candidates(pred: &[Side<'_>], gold: &[Side<'_>]) -> Vec<Match> {
    let mut all = Vec::with_capacity(pred.len() * gold.len());
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            all.push(Match { pred: i, gold: j, flags: flags(p, g) });
        }
    }
    all.sort_by(|a, b| {
        let (x, y) = (&a.flags, &b.flags);
        y.pair
            .cmp(&x.pair)
            .then(y.code.cmp(&x.code))
            .then(y.sub_code.cmp(&x.sub_code))
            .then(y.jaccard.total_cmp(&x.jaccard))
            .then_with(|| pred[a.pred].annotation.key().cmp(&pred[b.pred].annotation.key()))
            .then_with(|| gold[a.gold].annotation.key().cmp(&gold[b.gold].annotation.key()))
            .then(a.pred.cmp(&b.pred))
            .then(a.gold.cmp(&b.gold))
    });
    all
}

fn consume(ranked: &[Match], n_pred: usize, n_gold: usize, eligible: impl Fn(&PairFlags) -> bool) -> AlignmentResult {
    let mut used_p = vec![false; n_pred];
    let mut used_g = vec![false; n_gold];
    let mut matched = Vec::new();
    for m in ranked {
        if used_p[m.pred] || used_g[m.gold] || m.flags.is_zero() || !eligible(&m.flags) {
            continue;
        }
        used_p[m.pred] = true;
        used_g[m.gold] = true;
        matched.push(m.clone());
    }
    AlignmentResult {
        matched,
        unmatched_pred: (0..n_pred).filter(|&i| !used_p[i]).collect(),
        unmatched_gold: (0..n_gold).filter(|&j| !used_g[j]).collect(),
    }
}

/// Greedy one-to-one alignment over all pairs with nonzero affinity.
pub fn greedy_align(pred: &[Annotation], gold: &[Annotation], inventory: Option<&LabelInventory>) -> AlignmentResult {
    align_where(pred, gold, inventory, |_| true)
}

/// Greedy alignment restricted to pairs accepted by `eligible`.
pub fn align_where(
    pred: &[Annotation],
    gold: &[Annotation],
    inventory: Option<&LabelInventory>,
    eligible: impl Fn(&PairFlags) -> bool,
) -> AlignmentResult {
    let p: Vec<Side<'_>> = pred.iter().map(|a| Side::new(a, inventory)).collect();
    let g: Vec<Side<'_>> = gold.iter().map(|a| Side::new(a, inventory)).collect();
    consume(&ranked_candidates(&p, &g), p.len(), g.len(), eligible)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Precision, recall and F1 in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl From<Counts> for LevelScores {
    fn from(c: Counts) -> Self {
        // F1 as 2tp / (2tp + fp + fn): one rounding, equal to 2PR / (P + R).
        Self {
            precision: pct(c.tp, c.tp + c.fp),
            recall: pct(c.tp, c.tp + c.fn_),
            f1: pct(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}

/// Per-level counts for one example.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub code: Counts,
    pub sub_code: Counts,
    pub span: Counts,
    pub pair: Counts,
    pub triplet: Counts,
}

impl LevelCounts {
    pub fn get(&self, level: MatchLevel) -> Counts {
        match level {
            MatchLevel::Code => self.code,
            MatchLevel::SubCode => self.sub_code,
            MatchLevel::Span => self.span,
            MatchLevel::Pair => self.pair,
            MatchLevel::Triplet => self.triplet,
        }
    }

    fn slot(&mut self, level: MatchLevel) -> &mut Counts {
        match level {
            MatchLevel::Code => &mut self.code,
            MatchLevel::SubCode => &mut self.sub_code,
            MatchLevel::Span => &mut self.span,
            MatchLevel::Pair => &mut self.pair,
            MatchLevel::Triplet => &mut self.triplet,
        }
    }
}

impl std::ops::AddAssign for LevelCounts {
    fn add_assign(&mut self, o: Self) {
        for level in MatchLevel::ALL {
            *self.slot(level) += o.get(level);
        }
    }
}

/// Scores one example. Both sides are deduplicated; an invalid prediction
/// scores as empty.
pub fn score_example(
    pred: &PredictionSet,
    gold: &[Annotation],
    inventory: Option<&LabelInventory>,
    span_threshold: f64,
) -> LevelCounts {
    let p_anns = if pred.is_invalid() { Vec::new() } else { dedup_annotations(pred.annotations()) };
    let g_anns = dedup_annotations(gold);
    let p: Vec<Side<'_>> = p_anns.iter().map(|a| Side::new(a, inventory)).collect();
    let g: Vec<Side<'_>> = g_anns.iter().map(|a| Side::new(a, inventory)).collect();
    let ranked = ranked_candidates(&p, &g);
    let mut out = LevelCounts::default();
    for level in MatchLevel::ALL {
        let tp = consume(&ranked, p.len(), g.len(), |f| level.admits(f, span_threshold)).matched.len();
        *out.slot(level) = Counts { tp, fp: p.len() - tp, fn_: g.len() - tp };
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub examples: usize,
    /// Deduplicated prediction count.
    pub predictions: usize,
    pub gold_annotations: usize,
    pub invalid_predictions: usize,
    /// Gold examples with no prediction record, scored as empty.
    pub missing_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub span_threshold: f64,
    pub code: LevelScores,
    pub sub_code: LevelScores,
    pub span: LevelScores,
    pub pair: LevelScores,
    pub triplet: LevelScores,
    pub corpus: CorpusCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: LevelCounts, corpus: CorpusCounts, span_threshold: f64) -> Self {
        Self {
            span_threshold,
            code: counts.code.into(),
            sub_code: counts.sub_code.into(),
            span: counts.span.into(),
            pair: counts.pair.into(),
            triplet: counts.triplet.into(),
            corpus,
        }
    }

    pub fn level(&self, level: MatchLevel) -> &LevelScores {
        match level {
            MatchLevel::Code => &self.code,
            MatchLevel::SubCode => &self.sub_code,
            MatchLevel::Span => &self.span,
            MatchLevel::Pair => &self.pair,
            MatchLevel::Triplet => &self.triplet,
        }
    }

    /// Header plus one row per level.
    pub fn table(&self) -> Vec<Vec<String>> {
        let mut rows = vec![["level", "precision", "recall", "f1", "tp", "fp", "fn"].map(String::from).to_vec()];
        for level in MatchLevel::ALL {
            let s = self.level(level);
            rows.push(vec![
                level.as_str().into(),
                format!("{:.2}", s.precision),
                format!("{:.2}", s.recall),
                format!("{:.2}", s.f1),
                s.tp.to_string(),
                s.fp.to_string(),
                s.fn_.to_string(),
            ]);
        }
        rows
    }
}

/// Pairs each gold example with its prediction (empty when absent).
fn join<'a>(
    preds: &'a [PredictionSet],
    golds: &'a [GoldExample],
) -> Result<(Vec<(&'a GoldExample, Option<&'a PredictionSet>)>, usize), MetricsError> {
    let gold_ids: HashSet<&str> = golds.iter().map(|g| g.example_id.as_str()).collect();
    let mut by_id: HashMap<&str, &PredictionSet> = HashMap::new();
    for p in preds {
        if !gold_ids.contains(p.example_id()) {
            return Err(MetricsError::MissingGold(p.example_id().to_string()));
        }
        if by_id.insert(p.example_id(), p).is_some() {
            return Err(MetricsError::DuplicatePrediction(p.example_id().to_string()));
        }
    }
    let joined: Vec<_> = golds.iter().map(|g| (g, by_id.get(g.example_id.as_str()).copied())).collect();
    let missing = joined.iter().filter(|(_, p)| p.is_none()).count();
    Ok((joined, missing))
}

pub fn evaluate(
    preds: &[PredictionSet],
    golds: &[GoldExample],
    inventory: &LabelInventory,
    span_threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    if !(0.0..=1.0).contains(&span_threshold) {
        return Err(MetricsError::InvalidThreshold);
    }
    let (joined, missing) = join(preds, golds)?;
    let mut counts = LevelCounts::default();
    let mut corpus = CorpusCounts { examples: golds.len(), missing_predictions: missing, ..CorpusCounts::default() };
    for (g, p) in joined {
        let empty = PredictionSet::valid(g.example_id.clone(), Vec::new());
        let p = p.unwrap_or(&empty);
        let c = score_example(p, &g.annotations, Some(inventory), span_threshold);
        corpus.predictions += c.pair.tp + c.pair.fp;
        corpus.gold_annotations += c.pair.tp + c.pair.fn_;
        corpus.invalid_predictions += usize::from(p.is_invalid());
        counts += c;
    }
    Ok(MetricsReport::from_counts(counts, corpus, span_threshold))
}

/// Code-level F1 per inventory code, aligning only annotations of that code.
pub fn per_code_scores(
    preds: &[PredictionSet],
    golds: &[GoldExample],
    inventory: &LabelInventory,
) -> Result<BTreeMap<String, LevelScores>, MetricsError> {
    let (joined, _) = join(preds, golds)?;
    let mut out = BTreeMap::new();
    for code in inventory.codes() {
        let mut c = Counts::default();
        for (g, p) in &joined {
            let of_code = |anns: &[Annotation]| -> Vec<Annotation> {
                dedup_annotations(anns).into_iter().filter(|a| a.code.trim() == code.id).collect()
            };
            let pa = p.filter(|p| !p.is_invalid()).map_or_else(Vec::new, |p| of_code(p.annotations()));
            let ga = of_code(&g.annotations);
            let tp = align_where(&pa, &ga, Some(inventory), |f| f.code).matched.len();
            c += Counts { tp, fp: pa.len() - tp, fn_: ga.len() - tp };
        }
        out.insert(code.id.clone(), c.into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaxonomyOptions {
    pub span_threshold: f64,
    /// Gold pairs seen at most this often in training count as rare.
    pub rare_cutoff: usize,
    /// Training frequency per `(code, sub_code)`; the evaluated gold is used when absent.
    #[serde(skip)]
    pub train_counts: Option<HashMap<(String, String), usize>>,
}

impl Default for TaxonomyOptions {
    fn default() -> Self {
        Self { span_threshold: SPAN_THRESHOLD, rare_cutoff: 10, train_counts: None }
    }
}

/// Error rates in percent. Each category is counted independently against
/// its own denominator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTaxonomyReport {
    pub examples: usize,
    pub predictions: usize,
    pub rare_gold_instances: usize,
    pub correct_pairs: usize,
    // Percent of examples.
    pub code_confusion: f64,
    pub sub_code_confusion: f64,
    pub missing_annotation: f64,
    pub over_extraction: f64,
    pub evidence_boundary_error: f64,
    pub malformed_json: f64,
    pub adjacent_label_confusion: f64,
    // Percent of predictions.
    pub invalid_ontology_label: f64,
    pub invalid_pair: f64,
    pub parent_sub_code_mismatch: f64,
    // Percent of rare gold instances.
    pub rare_label_omission: f64,
    // Percent of pair-level matches.
    pub boundary_drift: f64,
    pub wrong_evidence_phrase: f64,
    pub no_evidence_span: f64,
    /// Code-level F1 per inventory code.
    pub per_code: BTreeMap<String, LevelScores>,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 }
}

/// Training-frequency table keyed by trimmed `(code, sub_code)`.
pub fn pair_frequencies(golds: &[GoldExample]) -> HashMap<(String, String), usize> {
    let mut out = HashMap::new();
    for g in golds {
        for a in dedup_annotations(&g.annotations) {
            let (c, s) = a.pair();
            *out.entry((c.to_string(), s.to_string())).or_default() += 1;
        }
    }
    out
}

#[derive(Default)]
struct TaxonomyTally {
    examples: [usize; 7],
    predictions: usize,
    invalid_label: usize,
    invalid_pair: usize,
    mismatch: usize,
    rare: usize,
    rare_missed: usize,
    correct_pairs: usize,
    drift: usize,
    wrong_phrase: usize,
    no_span: usize,
}

pub fn error_taxonomy(
    preds: &[PredictionSet],
    golds: &[GoldExample],
    inventory: &LabelInventory,
    options: &TaxonomyOptions,
) -> Result<ErrorTaxonomyReport, MetricsError> {
    let thr = options.span_threshold;
    if !(0.0..=1.0).contains(&thr) {
        return Err(MetricsError::InvalidThreshold);
    }
    let (joined, _) = join(preds, golds)?;
    let own_counts;
    let train = match &options.train_counts {
        Some(t) => t,
        None => {
            own_counts = pair_frequencies(golds);
            &own_counts
        }
    };
    let mut t = TaxonomyTally::default();
    for (g, p) in &joined {
        let invalid = p.is_some_and(|p| p.is_invalid());
        let p_anns = p.filter(|p| !p.is_invalid()).map_or_else(Vec::new, |p| dedup_annotations(p.annotations()));
        let g_anns = dedup_annotations(&g.annotations);
        let ps: Vec<Side<'_>> = p_anns.iter().map(|a| Side::new(a, Some(inventory))).collect();
        let gs: Vec<Side<'_>> = g_anns.iter().map(|a| Side::new(a, Some(inventory))).collect();
        let ranked = ranked_candidates(&ps, &gs);
        let pair_align = consume(&ranked, ps.len(), gs.len(), |f| f.pair);

        // Best gold counterpart of each prediction: its pair match, else the
        // top-ranked gold with nonzero affinity.
        let mut counterpart: Vec<Option<&Match>> = vec![None; ps.len()];
        for m in &pair_align.matched {
            counterpart[m.pred] = Some(m);
        }
        for m in ranked.iter().filter(|m| !m.flags.is_zero()) {
            if counterpart[m.pred].is_none() {
                counterpart[m.pred] = Some(m);
            }
        }
        let mut code_conf = false;
        let mut sub_conf = false;
        let mut adjacent = false;
        for (i, c) in counterpart.iter().enumerate() {
            let Some(m) = c else { continue };
            let (pc, psub) = ps[i].annotation.pair();
            let (gc, gsub) = gs[m.gold].annotation.pair();
            if pc != gc {
                code_conf = true;
            } else if psub != gsub {
                sub_conf = true;
                adjacent |= m.flags.jaccard >= thr;
            }
        }
        let boundary = pair_align.matched.iter().any(|m| m.flags.jaccard < thr);
        let flags = [
            code_conf,
            sub_conf,
            !pair_align.unmatched_gold.is_empty(),
            !pair_align.unmatched_pred.is_empty(),
            boundary,
            invalid,
            adjacent,
        ];
        for (slot, f) in t.examples.iter_mut().zip(flags) {
            *slot += usize::from(f);
        }

        for s in &ps {
            let check = s.check.expect("inventory given");
            t.predictions += 1;
            t.invalid_label += usize::from(!check.code_known || !check.sub_code_known);
            t.invalid_pair += usize::from(check.code_known && !check.pair_valid);
            t.mismatch += usize::from(check.crossed());
        }
        let matched_gold: HashSet<usize> = pair_align.matched.iter().map(|m| m.gold).collect();
        for (j, s) in gs.iter().enumerate() {
            let (c, sub) = s.annotation.pair();
            if train.get(&(c.to_string(), sub.to_string())).copied().unwrap_or(0) <= options.rare_cutoff {
                t.rare += 1;
                t.rare_missed += usize::from(!matched_gold.contains(&j));
            }
        }
        for m in &pair_align.matched {
            t.correct_pairs += 1;
            let j = m.flags.jaccard;
            if ps[m.pred].tokens.is_empty() {
                t.no_span += 1;
            } else if j == 0.0 {
                t.wrong_phrase += 1;
            } else if j < thr {
                t.drift += 1;
            }
        }
    }
    let n = joined.len();
    let e = |k: usize| pct(t.examples[k], n);
    Ok(ErrorTaxonomyReport {
        examples: n,
        predictions: t.predictions,
        rare_gold_instances: t.rare,
        correct_pairs: t.correct_pairs,
        code_confusion: e(0),
        sub_code_confusion: e(1),
        missing_annotation: e(2),
        over_extraction: e(3),
        evidence_boundary_error: e(4),
        malformed_json: e(5),
        adjacent_label_confusion: e(6),
        invalid_ontology_label: pct(t.invalid_label, t.predictions),
        invalid_pair: pct(t.invalid_pair, t.predictions),
        parent_sub_code_mismatch: pct(t.mismatch, t.predictions),
        rare_label_omission: pct(t.rare_missed, t.rare),
        boundary_drift: pct(t.drift, t.correct_pairs),
        wrong_evidence_phrase: pct(t.wrong_phrase, t.correct_pairs),
        no_evidence_span: pct(t.no_span, t.correct_pairs),
        per_code: per_code_scores(preds, golds, inventory)?,
    })
}

/// Output-validity rates in percent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaDiagnostics {
    pub outputs: usize,
    pub annotations: usize,
    /// Unrecoverable outputs over all outputs.
    pub invalid_json_rate: f64,
    /// Annotations with an unknown code or sub-code over all annotations.
    pub invalid_label_rate: f64,
    /// Annotations pairing two known labels that are not parent and child.
    pub invalid_pair_rate: f64,
    /// Parsed outputs with no annotations over all outputs.
    pub empty_output_rate: f64,
    pub routes: BTreeMap<RecoveryRoute, usize>,
}

pub fn schema_diagnostics(raw: &[RawOutput], inventory: &LabelInventory) -> SchemaDiagnostics {
    let mut routes: BTreeMap<RecoveryRoute, usize> = RecoveryRoute::ALL.iter().map(|&r| (r, 0)).collect();
    let (mut annotations, mut bad_label, mut bad_pair, mut empty) = (0, 0, 0, 0);
    for r in raw {
        let out = recover(&r.text, &r.example_id);
        *routes.entry(out.route).or_default() += 1;
        if out.route != RecoveryRoute::Failed && out.prediction.is_empty() {
            empty += 1;
        }
        for a in out.prediction.annotations() {
            let c = LabelCheck::of(a, inventory);
            annotations += 1;
            bad_label += usize::from(!c.code_known || !c.sub_code_known);
            bad_pair += usize::from(c.crossed());
        }
    }
    SchemaDiagnostics {
        outputs: raw.len(),
        annotations,
        invalid_json_rate: pct(routes[&RecoveryRoute::Failed], raw.len()),
        invalid_label_rate: pct(bad_label, annotations),
        invalid_pair_rate: pct(bad_pair, annotations),
        empty_output_rate: pct(empty, raw.len()),
        routes,
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{Label, LabelKind};

    fn a(c: &str, s: &str, span: &str) -> Annotation {
        Annotation::new(c, s, span)
    }

    fn inventory() -> LabelInventory {
        let code = |id: &str| Label { kind: LabelKind::Code, id: id.into(), parent: None, description: String::new() };
        let sub = |id: &str, p: &str| Label { kind: LabelKind::SubCode, id: id.into(), parent: Some(p.into()), description: String::new() };
        LabelInventory::new(vec![code("A"), code("B"), sub("x", "A"), sub("y", "A"), sub("z", "B")]).unwrap()
    }

    #[test]
    fn identical_triplet_matches_everywhere() {
        let p = [a("A", "x", "my head")];
        let r = greedy_align(&p, &p, None);
        assert_eq!(r.matched.len(), 1);
        let c = score_example(&PredictionSet::valid("e", p.to_vec()), &p, Some(&inventory()), 0.6);
        for level in MatchLevel::ALL {
            assert_eq!(c.get(level), Counts { tp: 1, fp: 0, fn_: 0 });
        }
    }

    #[test]
    fn label_correctness_outranks_overlap() {
        let pred = [a("A", "x", "head hurts today"), a("B", "z", "my head hurts")];
        let gold = [a("A", "x", "my head hurts")];
        let r = greedy_align(&pred, &gold, None);
        assert_eq!((r.matched[0].pred, r.matched[0].gold), (0, 0));
        assert_eq!(r.unmatched_pred, [1]);
    }

    #[test]
    fn empty_predictions_leave_gold_unmatched() {
        let gold = [a("A", "x", "s"), a("B", "z", "t")];
        let r = greedy_align(&[], &gold, None);
        assert!(r.matched.is_empty());
        assert_eq!(r.unmatched_gold, [0, 1]);
    }

    #[test]
    fn zero_affinity_never_matches() {
        let r = greedy_align(&[a("A", "x", "alpha")], &[a("B", "z", "beta")], None);
        assert!(r.matched.is_empty());
    }

    #[test]
    fn out_of_inventory_labels_do_not_agree() {
        let inv = inventory();
        let p = PredictionSet::valid("e", vec![a("Q", "x", "s t")]);
        let c = score_example(&p, &[a("Q", "x", "s t")], Some(&inv), 0.6);
        assert_eq!(c.code.tp, 0);
        assert_eq!(c.sub_code.tp, 1);
        assert_eq!(c.span.tp, 1);
        assert_eq!(c.pair.tp, 0);
    }

    #[test]
    fn f1_formula() {
        let s = LevelScores::from(Counts { tp: 1, fp: 1, fn_: 3 });
        assert!((s.precision - 50.0).abs() < 1e-12 && (s.recall - 25.0).abs() < 1e-12);
        assert!((s.f1 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(LevelScores::from(Counts::default()).f1, 0.0);
    }

    #[test]
    fn evaluate_errors() {
        let inv = inventory();
        let gold = vec![GoldExample { example_id: "g".into(), context: "s".into(), sentence: String::new(), annotations: vec![] }];
        let stray = vec![PredictionSet::valid("h", vec![])];
        assert_eq!(evaluate(&stray, &gold, &inv, 0.6), Err(MetricsError::MissingGold("h".into())));
        let twice = vec![PredictionSet::valid("g", vec![]), PredictionSet::valid("g", vec![])];
        assert_eq!(evaluate(&twice, &gold, &inv, 0.6), Err(MetricsError::DuplicatePrediction("g".into())));
    }

    #[test]
    fn diagnostics_counts() {
        let inv = inventory();
        let raw: Vec<RawOutput> = (0..100)
            .map(|i| RawOutput {
                example_id: format!("e{i}"),
                text: if i == 0 { "no json".into() } else { r#"{"results":[{"Code":"A","Sub-code":"x","Span":"s"}]}"#.into() },
            })
            .collect();
        let d = schema_diagnostics(&raw, &inv);
        assert!((d.invalid_json_rate - 1.0).abs() < 1e-12);
        assert_eq!((d.invalid_label_rate, d.empty_output_rate), (0.0, 0.0));
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
    }
}
