mod common;

use common::golden;
use common::rng::seeded;
use ontex::metrics::{
    error_taxonomy, evaluate, greedy_align, per_code_scores, schema_diagnostics, score_example, MatchLevel,
    TaxonomyOptions, SPAN_THRESHOLD,
};
use ontex::ontology::LabelInventory;
use ontex::schema::{Annotation, GoldExample, PredictionSet, RawOutput};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn pct(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

#[test]
fn golden_fixture_scores() {
    let (inv, gold, preds) = golden::load();
    let report = evaluate(&preds, &gold, &inv, SPAN_THRESHOLD).unwrap();
    golden::check(&report).unwrap();
}

#[test]
fn golden_fixture_taxonomy() {
    let (inv, gold, preds) = golden::load();
    let t = error_taxonomy(&preds, &gold, &inv, &TaxonomyOptions::default()).unwrap();
    assert_eq!((t.examples, t.predictions, t.rare_gold_instances, t.correct_pairs), (12, 12, 14, 8));
    assert_eq!(t.code_confusion, pct(2, 12));
    assert_eq!(t.sub_code_confusion, pct(1, 12));
    assert_eq!(t.missing_annotation, pct(5, 12));
    assert_eq!(t.over_extraction, pct(4, 12));
    assert_eq!(t.evidence_boundary_error, pct(2, 12));
    assert_eq!(t.malformed_json, pct(1, 12));
    assert_eq!(t.adjacent_label_confusion, pct(1, 12));
    assert_eq!(t.invalid_ontology_label, pct(1, 12));
    assert_eq!((t.invalid_pair, t.parent_sub_code_mismatch), (0.0, 0.0));
    assert_eq!(t.rare_label_omission, pct(6, 14));
    assert_eq!(t.boundary_drift, pct(3, 8));
    assert_eq!((t.wrong_evidence_phrase, t.no_evidence_span), (0.0, 0.0));
    let f1 = |code: &str| t.per_code[code].f1;
    assert_eq!((f1("A"), f1("B"), f1("C")), (pct(12, 14), pct(6, 8), 0.0));
}

#[test]
fn label_validity_and_grounding_categories() {
    let (inv, _, _) = golden::load();
    let gold = vec![GoldExample {
        example_id: "g".into(),
        context: "my head hurts and I need a refill".into(),
        sentence: String::new(),
        annotations: vec![
            Annotation::new("A", "x", "my head hurts"),
            Annotation::new("B", "z", "need a refill"),
            Annotation::new("B", "w", "refill"),
        ],
    }];
    let preds = vec![PredictionSet::valid(
        "g",
        vec![
            Annotation::new("A", "x", "something else entirely"),
            Annotation::new("B", "z", ""),
            Annotation::new("B", "x", "refill"),
            Annotation::new("B", "nope", "refill"),
        ],
    )];
    let train = [(("A".to_string(), "x".to_string()), 50), (("B".to_string(), "z".to_string()), 3)].into();
    let opts = TaxonomyOptions { train_counts: Some(train), ..TaxonomyOptions::default() };
    let t = error_taxonomy(&preds, &gold, &inv, &opts).unwrap();
    // (B, x) is crossed; (B, nope) has an unknown sub-code.
    assert_eq!(t.invalid_ontology_label, pct(1, 4));
    assert_eq!(t.invalid_pair, pct(2, 4));
    assert_eq!(t.parent_sub_code_mismatch, pct(1, 4));
    // Rare gold: (B, z) at 3 and (B, w) unseen; (B, w) is missed.
    assert_eq!((t.rare_gold_instances, t.rare_label_omission), (2, pct(1, 2)));
    assert_eq!(t.correct_pairs, 2);
    assert_eq!((t.wrong_evidence_phrase, t.no_evidence_span, t.boundary_drift), (pct(1, 2), pct(1, 2), 0.0));
}

#[test]
fn diagnostics_over_raw_outputs() {
    let (inv, _, _) = golden::load();
    let texts = [
        r#"{"results": [{"Code": "A", "Sub-code": "x", "Span": "s"}]}"#,
        r#"```json
{"results": [{"Code": "Z", "Sub-code": "x", "Span": "s"}, {"Code": "B", "Sub-code": "x", "Span": "t"}]}
```"#,
        r#"{"results": []}"#,
        "no structured output",
    ];
    let raw: Vec<RawOutput> =
        texts.iter().enumerate().map(|(i, t)| RawOutput { example_id: i.to_string(), text: t.to_string() }).collect();
    let d = schema_diagnostics(&raw, &inv);
    assert_eq!((d.outputs, d.annotations), (4, 3));
    assert_eq!(d.invalid_json_rate, pct(1, 4));
    assert_eq!(d.empty_output_rate, pct(1, 4));
    assert_eq!(d.invalid_label_rate, pct(1, 3));
    assert_eq!(d.invalid_pair_rate, pct(1, 3));
}

fn random_annotation(rng: &mut impl Rng) -> Annotation {
    const WORDS: [&str; 6] = ["pain", "head", "my", "refill", "test", "today"];
    let n = rng.random_range(0..4);
    let span: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    let codes = [("A", "x"), ("A", "y"), ("B", "z"), ("B", "w"), ("C", "v"), ("Q", "x"), ("B", "x")];
    let (c, s) = codes[rng.random_range(0..codes.len())];
    Annotation::new(c, s, span.join(" "))
}

#[test]
fn duplicate_injection_changes_no_score() {
    let (inv, gold, preds) = golden::load();
    let base = evaluate(&preds, &gold, &inv, SPAN_THRESHOLD).unwrap();
    let mut rng = seeded(909);
    for case in 0..200 {
        let mut mutated = preds.clone();
        let candidates: Vec<usize> = (0..mutated.len()).filter(|&i| !mutated[i].is_empty()).collect();
        let i = candidates[rng.random_range(0..candidates.len())];
        let mut anns = mutated[i].annotations().to_vec();
        for _ in 0..rng.random_range(1..4) {
            let dup = anns[rng.random_range(0..anns.len())].clone();
            let at = rng.random_range(0..=anns.len());
            anns.insert(at, dup);
        }
        mutated[i] = mutated[i].with_annotations(anns);
        let r = evaluate(&mutated, &gold, &inv, SPAN_THRESHOLD).unwrap();
        for level in MatchLevel::ALL {
            assert_eq!(r.level(level).f1, base.level(level).f1, "case {case} {}", level.as_str());
        }
    }
}

#[test]
fn prediction_order_changes_no_score() {
    let (inv, _, _) = golden::load();
    let mut rng = seeded(910);
    for case in 0..300 {
        let p: Vec<Annotation> = (0..rng.random_range(0..6)).map(|_| random_annotation(&mut rng)).collect();
        let g: Vec<Annotation> = (0..rng.random_range(0..6)).map(|_| random_annotation(&mut rng)).collect();
        let mut shuffled = p.clone();
        shuffled.shuffle(&mut rng);
        let a = score_example(&PredictionSet::valid("e", p), &g, Some(&inv), SPAN_THRESHOLD);
        let b = score_example(&PredictionSet::valid("e", shuffled), &g, Some(&inv), SPAN_THRESHOLD);
        assert_eq!(a, b, "case {case}");
    }
}

fn inventory() -> LabelInventory {
    golden::load().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn levels_are_monotone_and_alignment_one_to_one(seed in any::<u64>()) {
        let inv = inventory();
        let mut rng = seeded(seed);
        let p: Vec<Annotation> = (0..rng.random_range(0..7)).map(|_| random_annotation(&mut rng)).collect();
        let g: Vec<Annotation> = (0..rng.random_range(0..7)).map(|_| random_annotation(&mut rng)).collect();
        let c = score_example(&PredictionSet::valid("e", p.clone()), &g, Some(&inv), SPAN_THRESHOLD);
        prop_assert!(c.triplet.tp <= c.pair.tp);
        prop_assert!(c.triplet.tp <= c.span.tp);
        prop_assert!(c.pair.tp <= c.code.tp.min(c.sub_code.tp));
        for level in MatchLevel::ALL {
            let k = c.get(level);
            prop_assert_eq!(k.tp + k.fp, ontex::schema::dedup_annotations(&p).len());
            prop_assert_eq!(k.tp + k.fn_, ontex::schema::dedup_annotations(&g).len());
        }
        let r = greedy_align(&p, &g, Some(&inv));
        let mut used_p = std::collections::HashSet::new();
        let mut used_g = std::collections::HashSet::new();
        for m in &r.matched {
            prop_assert!(used_p.insert(m.pred) && used_g.insert(m.gold));
        }
        prop_assert_eq!(r.matched.len() + r.unmatched_pred.len(), p.len());
        prop_assert_eq!(r.matched.len() + r.unmatched_gold.len(), g.len());
    }

    #[test]
    fn perfect_predictions_score_one_hundred(seed in any::<u64>()) {
        let inv = inventory();
        let mut rng = seeded(seed);
        let g: Vec<Annotation> = (0..rng.random_range(1..6))
            .map(|_| random_annotation(&mut rng))
            .filter(|a| inv.is_valid_pair(&a.code, &a.sub_code) && !a.span.is_empty())
            .collect();
        prop_assume!(!g.is_empty());
        let context = g.iter().map(|a| a.span.as_str()).collect::<Vec<_>>().join(" | ");
        let gold = vec![GoldExample { example_id: "e".into(), context, sentence: String::new(), annotations: g.clone() }];
        let report = evaluate(&[PredictionSet::valid("e", g)], &gold, &inv, SPAN_THRESHOLD).unwrap();
        for level in MatchLevel::ALL {
            prop_assert_eq!(report.level(level).f1, 100.0);
        }
    }
}

#[test]
fn per_code_sums_to_code_level_true_positives() {
    let (inv, gold, preds) = golden::load();
    let per = per_code_scores(&preds, &gold, &inv).unwrap();
    let report = evaluate(&preds, &gold, &inv, SPAN_THRESHOLD).unwrap();
    assert_eq!(per.values().map(|s| s.tp).sum::<usize>(), report.code.tp);
}
