//! The hand-scored fixture corpus under `tests/fixtures/golden`.

use std::path::PathBuf;

use ontex::metrics::{MatchLevel, MetricsReport};
use ontex::ontology::LabelInventory;
use ontex::schema::{read_gold_path, read_predictions_path, GoldExample, PredictionSet};
use serde_json::Value;

pub fn dir() -> PathBuf {
    // Resolves from either workspace crate.
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden")
}

pub fn load() -> (LabelInventory, Vec<GoldExample>, Vec<PredictionSet>) {
    let d = dir();
    (
        LabelInventory::from_path(d.join("inventory.jsonl")).unwrap(),
        read_gold_path(d.join("gold.jsonl")).unwrap(),
        read_predictions_path(d.join("predictions.jsonl")).unwrap(),
    )
}

pub fn expected() -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir().join("expected_metrics.json")).unwrap()).unwrap()
}

/// Compares counts exactly and percentages against `100 * num / den`.
pub fn check(report: &MetricsReport) -> Result<(), String> {
    let want = expected();
    let pct = |num: u64, den: u64| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    for level in MatchLevel::ALL {
        let w = &want["levels"][level.as_str()];
        let (tp, fp, fn_) = (w["tp"].as_u64().unwrap(), w["fp"].as_u64().unwrap(), w["fn"].as_u64().unwrap());
        let s = report.level(level);
        let got = (s.tp as u64, s.fp as u64, s.fn_ as u64);
        if got != (tp, fp, fn_) {
            return Err(format!("{}: counts {got:?}, expected {:?}", level.as_str(), (tp, fp, fn_)));
        }
        let scores = [(s.precision, pct(tp, tp + fp)), (s.recall, pct(tp, tp + fn_)), (s.f1, pct(2 * tp, 2 * tp + fp + fn_))];
        if scores.iter().any(|(g, w)| g != w) {
            return Err(format!("{}: scores {scores:?}", level.as_str()));
        }
    }
    let corpus = serde_json::to_value(report.corpus).unwrap();
    if corpus != want["corpus"] {
        return Err(format!("corpus counts {corpus}, expected {}", want["corpus"]));
    }
    if report.triplet.tp > report.pair.tp {
        return Err("triplet TP exceeds pair TP".into());
    }
    Ok(())
}
