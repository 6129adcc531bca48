//! Structured predictions, gold records, inventory validation and
//! line-delimited record I/O.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ontology::LabelInventory;
use crate::text::is_verbatim;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SchemaError {
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("document has no \"results\" array")]
    MissingResults,
    #[error("results entry {index} is malformed: {message}")]
    InvalidEntry { index: usize, message: String },
    #[error("cannot serialize a prediction with invalid parse status ({0})")]
    NotSerializable(String),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("duplicate example_id {0}")]
    DuplicateId(String),
    #[error("example {example_id}: gold span {span:?} does not occur in the context")]
    UngroundedGold { example_id: String, span: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for SchemaError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// One `(Code, Sub-code, Span)` triplet. Labels are not checked on construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "Code")]
    pub code: String,
    #[serde(rename = "Sub-code", alias = "Subcode", alias = "sub_code")]
    pub sub_code: String,
    #[serde(rename = "Span")]
    pub span: String,
}

impl Annotation {
    pub fn new(code: impl Into<String>, sub_code: impl Into<String>, span: impl Into<String>) -> Self {
        Self { code: code.into(), sub_code: sub_code.into(), span: span.into() }
    }

    /// Trimmed triple used for duplicate detection.
    pub fn key(&self) -> (&str, &str, &str) {
        (self.code.trim(), self.sub_code.trim(), self.span.trim())
    }

    /// Trimmed `(code, sub_code)`.
    pub fn pair(&self) -> (&str, &str) {
        (self.code.trim(), self.sub_code.trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Valid,
    Recovered,
    Invalid,
}

impl ParseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Valid => "valid",
            Self::Recovered => "recovered",
            Self::Invalid => "invalid",
        }
    }
}

/// Predictions for one example. An invalid set always has no annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PredictionRecord", into = "PredictionRecord")]
pub struct PredictionSet {
    example_id: String,
    annotations: Vec<Annotation>,
    parse_status: ParseStatus,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    example_id: String,
    parse_status: ParseStatus,
    #[serde(default)]
    results: Vec<Annotation>,
}

impl TryFrom<PredictionRecord> for PredictionSet {
    type Error = String;

    fn try_from(r: PredictionRecord) -> Result<Self, String> {
        if r.parse_status == ParseStatus::Invalid && !r.results.is_empty() {
            return Err(format!("example {}: invalid status with nonempty results", r.example_id));
        }
        Ok(Self { example_id: r.example_id, annotations: r.results, parse_status: r.parse_status })
    }
}

impl From<PredictionSet> for PredictionRecord {
    fn from(p: PredictionSet) -> Self {
        Self { example_id: p.example_id, parse_status: p.parse_status, results: p.annotations }
    }
}

impl PredictionSet {
    pub fn valid(example_id: impl Into<String>, annotations: Vec<Annotation>) -> Self {
        Self { example_id: example_id.into(), annotations, parse_status: ParseStatus::Valid }
    }

    pub fn recovered(example_id: impl Into<String>, annotations: Vec<Annotation>) -> Self {
        Self { example_id: example_id.into(), annotations, parse_status: ParseStatus::Recovered }
    }

    pub fn invalid(example_id: impl Into<String>) -> Self {
        Self { example_id: example_id.into(), annotations: Vec::new(), parse_status: ParseStatus::Invalid }
    }

    pub fn example_id(&self) -> &str {
        &self.example_id
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn parse_status(&self) -> ParseStatus {
        self.parse_status
    }

    pub fn is_invalid(&self) -> bool {
        self.parse_status == ParseStatus::Invalid
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Same id and status with a new annotation list; an invalid set stays empty.
    pub fn with_annotations(&self, annotations: Vec<Annotation>) -> Self {
        match self.parse_status {
            ParseStatus::Invalid => self.clone(),
            status => Self { example_id: self.example_id.clone(), annotations, parse_status: status },
        }
    }

    pub fn into_annotations(self) -> Vec<Annotation> {
        self.annotations
    }
}

/// Reference record: message context, coded segment and gold triplets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldExample {
    pub example_id: String,
    pub context: String,
    #[serde(default)]
    pub sentence: String,
    #[serde(rename = "results")]
    pub annotations: Vec<Annotation>,
}

impl GoldExample {
    /// Gold spans that do not occur in the context.
    pub fn ungrounded_spans(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| !is_verbatim(&a.span, &self.context))
    }

    /// The coded segment, or the full context when no segment is given.
    pub fn segment(&self) -> &str {
        if self.sentence.trim().is_empty() { &self.context } else { &self.sentence }
    }
}

/// Unparsed model output for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOutput {
    pub example_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub unknown_codes: Vec<String>,
    pub unknown_sub_codes: Vec<String>,
    /// Both labels exist but the sub-code belongs to another parent.
    pub invalid_pairs: Vec<(String, String)>,
    pub is_empty: bool,
}

/// How one annotation's labels relate to the inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelCheck {
    pub code_known: bool,
    pub sub_code_known: bool,
    pub pair_valid: bool,
}

impl LabelCheck {
    pub fn of(annotation: &Annotation, inventory: &LabelInventory) -> Self {
        let (code, sub) = annotation.pair();
        Self {
            code_known: inventory.has_code(code),
            sub_code_known: inventory.has_sub_code(sub),
            pair_valid: inventory.is_valid_pair(code, sub),
        }
    }

    /// Both labels known but not parent and child.
    pub fn crossed(&self) -> bool {
        self.code_known && self.sub_code_known && !self.pair_valid
    }
}

/// Lists each distinct out-of-inventory label and crossed pair in first-seen order.
pub fn validate(pred: &PredictionSet, inventory: &LabelInventory) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for a in &pred.annotations {
        let check = LabelCheck::of(a, inventory);
        let (code, sub) = a.pair();
        if !check.code_known && seen.insert(("c", code, "")) {
            report.unknown_codes.push(code.to_string());
        }
        if !check.sub_code_known && seen.insert(("s", sub, "")) {
            report.unknown_sub_codes.push(sub.to_string());
        }
        if check.crossed() && seen.insert(("p", code, sub)) {
            report.invalid_pairs.push((code.to_string(), sub.to_string()));
        }
    }
    report.is_empty =
        report.unknown_codes.is_empty() && report.unknown_sub_codes.is_empty() && report.invalid_pairs.is_empty();
    report
}

/// Keeps the first occurrence of each trimmed triple, preserving order.
pub fn dedup_annotations(annotations: &[Annotation]) -> Vec<Annotation> {
    let mut seen = HashSet::new();
    annotations.iter().filter(|a| seen.insert(a.key())).cloned().collect()
}

pub fn dedup(pred: &PredictionSet) -> PredictionSet {
    pred.with_annotations(dedup_annotations(&pred.annotations))
}

#[derive(Serialize)]
struct ResultsDoc<'a> {
    results: &'a [Annotation],
}

/// Canonical compact document `{"results":[...]}`.
pub fn serialize_annotations(annotations: &[Annotation]) -> String {
    serde_json::to_string(&ResultsDoc { results: annotations }).expect("strings always serialize")
}

pub fn serialize(pred: &PredictionSet) -> Result<String, SchemaError> {
    if pred.is_invalid() {
        return Err(SchemaError::NotSerializable(pred.example_id.clone()));
    }
    Ok(serialize_annotations(&pred.annotations))
}

/// Strict parse: an object with a `results` array whose every entry is a
/// well-formed annotation.
pub fn deserialize(text: &str, example_id: impl Into<String>) -> Result<PredictionSet, SchemaError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SchemaError::Json(e.to_string()))?;
    let entries = value.get("results").and_then(Value::as_array).ok_or(SchemaError::MissingResults)?;
    let annotations = entries
        .iter()
        .enumerate()
        .map(|(index, v)| {
            Annotation::deserialize(v).map_err(|e| SchemaError::InvalidEntry { index, message: e.to_string() })
        })
        .collect::<Result<_, _>>()?;
    Ok(PredictionSet::valid(example_id, annotations))
}

/// Per-entry lenient reading of a results array: well-formed entries are
/// kept in order, the rest counted.
pub fn lenient_entries(entries: &[Value]) -> (Vec<Annotation>, usize) {
    let mut kept = Vec::with_capacity(entries.len());
    let mut dropped = 0;
    for v in entries {
        match Annotation::deserialize(v) {
            Ok(a) => kept.push(a),
            Err(_) => dropped += 1,
        }
    }
    (kept, dropped)
}

/// Parses one JSON document per nonblank line.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, SchemaError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SchemaError::Record { line: n + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn read_jsonl_path<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, SchemaError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, records: &[T]) -> Result<(), SchemaError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| SchemaError::Json(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_jsonl_path<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), SchemaError> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), records)
}

fn ensure_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), SchemaError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(SchemaError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Reads gold records, rejecting duplicate ids and spans absent from their context.
pub fn read_gold(reader: impl BufRead) -> Result<Vec<GoldExample>, SchemaError> {
    let gold: Vec<GoldExample> = read_jsonl(reader)?;
    ensure_unique_ids(gold.iter().map(|g| g.example_id.as_str()))?;
    for g in &gold {
        if let Some(a) = g.ungrounded_spans().next() {
            return Err(SchemaError::UngroundedGold { example_id: g.example_id.clone(), span: a.span.clone() });
        }
    }
    Ok(gold)
}

pub fn read_gold_path(path: impl AsRef<Path>) -> Result<Vec<GoldExample>, SchemaError> {
    let file = std::fs::File::open(path)?;
    read_gold(std::io::BufReader::new(file))
}

pub fn read_predictions(reader: impl BufRead) -> Result<Vec<PredictionSet>, SchemaError> {
    let preds: Vec<PredictionSet> = read_jsonl(reader)?;
    ensure_unique_ids(preds.iter().map(|p| p.example_id.as_str()))?;
    Ok(preds)
}

pub fn read_predictions_path(path: impl AsRef<Path>) -> Result<Vec<PredictionSet>, SchemaError> {
    let file = std::fs::File::open(path)?;
    read_predictions(std::io::BufReader::new(file))
}
