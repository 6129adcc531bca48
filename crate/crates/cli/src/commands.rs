//! Command implementations. Each reads its inputs, writes its reports into
//! the output directory and records both in the run manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ontex::alignment::{alignment_losses, total_loss, MemoryBank, RepresentationVector, TrainingLossBreakdown};
use ontex::checkpoint::{average_named_vectors, NamedVectorMap};
use ontex::corpus::corpus_stats;
use ontex::gateway::{GatewayError, GenerationRequest, GenerationResponse, Message, TextGenerator};
use ontex::matrix::Matrix;
use ontex::metrics::{error_taxonomy, evaluate, pair_frequencies, schema_diagnostics, LevelScores, TaxonomyOptions};
use ontex::ontology::{build_ontology_vector, build_prior, read_embeddings, LabelInventory, OntologyVector, PriorMatrix};
use ontex::preference::{generate_preference_pairs, CorruptionKind};
use ontex::recovery::{recover, RecoveryRoute};
use ontex::refine::{
    cgra, cot_sr, hybrid_mild, seed_merge, selector, self_consistency_generate, span_anchored_rerank, CandidateSet,
    CandidateSource, ExampleText, PromptTemplates, Refinement, RefinementConfig,
};
use ontex::schema::{
    dedup, read_gold_path, read_jsonl_path, read_predictions_path, validate, write_jsonl_path, GoldExample,
    ParseStatus, PredictionSet, RawOutput,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{require, PipelineConfig};
use crate::error::CliError;
use crate::manifest::{FileDigest, RunManifest};
use crate::report::{markdown, write_csv};
use crate::{AlignLossArgs, AvgArgs, Cli, Command, Dtype, EvaluateArgs, Method, PriorBuildArgs, RawArgs, RefineArgs, ValidateArgs};

pub const MANIFEST_FILE: &str = "run_manifest.json";

struct Ctx {
    cfg: PipelineConfig,
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl Ctx {
    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn emitted(&mut self, name: &str) -> Result<(), CliError> {
        self.manifest.outputs.push(FileDigest::of(&self.out(name))?);
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        std::fs::write(self.out(name), body)?;
        self.emitted(name)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut body = serde_json::to_string_pretty(value)?;
        body.push('\n');
        self.text(name, &body)
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<(), CliError> {
        write_jsonl_path(self.out(name), records)?;
        self.emitted(name)
    }

    /// Writes `<stem>.csv` and `<stem>.md`.
    fn table(&mut self, stem: &str, rows: &[Vec<String>]) -> Result<(), CliError> {
        let csv = format!("{stem}.csv");
        write_csv(&self.out(&csv), rows)?;
        self.emitted(&csv)?;
        self.text(&format!("{stem}.md"), &markdown(rows))
    }

    fn inventory(&mut self) -> Result<LabelInventory, CliError> {
        let path = require(self.cfg.paths.inventory.as_ref(), "inventory")?;
        self.input(&path)?;
        LabelInventory::from_path(&path).map_err(|e| CliError::data(path.display(), e))
    }

    fn gold(&mut self) -> Result<Vec<GoldExample>, CliError> {
        let path = require(self.cfg.paths.gold.as_ref(), "gold")?;
        self.gold_at(&path)
    }

    fn gold_at(&mut self, path: &Path) -> Result<Vec<GoldExample>, CliError> {
        self.input(path)?;
        let gold = read_gold_path(path).map_err(|e| CliError::data(path.display(), e))?;
        unique_ids(gold.iter().map(|g| g.example_id.as_str()), path)?;
        Ok(gold)
    }

    fn predictions_at(&mut self, path: &Path) -> Result<Vec<PredictionSet>, CliError> {
        self.input(path)?;
        read_predictions_path(path).map_err(|e| CliError::data(path.display(), e))
    }
}

fn unique_ids<'a>(ids: impl Iterator<Item = &'a str>, path: &Path) -> Result<(), CliError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(CliError::Data(format!("{}: duplicate example_id {id}", path.display())));
        }
    }
    Ok(())
}

/// Folds flag overrides into the configuration so the manifest hash covers them.
fn effective_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_path(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(p) = &cli.inventory {
        cfg.paths.inventory = Some(p.clone());
    }
    if let Some(p) = &cli.gold {
        cfg.paths.gold = Some(p.clone());
    }
    match &cli.command {
        Command::Validate(ValidateArgs { predictions: Some(p), .. }) => cfg.paths.predictions = Some(p.clone()),
        Command::Evaluate(a) => {
            if let Some(p) = &a.predictions {
                cfg.paths.predictions = Some(p.clone());
            }
            if let Some(p) = &a.train_gold {
                cfg.paths.train_gold = Some(p.clone());
            }
        }
        Command::Refine(RefineArgs { mock_script: Some(p), .. }) => cfg.gateway.mock_script = Some(p.clone()),
        Command::AlignLoss(AlignLossArgs { representations: Some(p), .. }) => cfg.paths.representations = Some(p.clone()),
        Command::PriorBuild(PriorBuildArgs { embeddings: Some(p) }) => cfg.paths.embeddings = Some(p.clone()),
        _ => {}
    }
    cfg.load_prompts()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli, args: Vec<String>) -> Result<(), CliError> {
    let cfg = effective_config(&cli)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::data(cfg.output_dir.display(), e))?;
    let manifest = RunManifest::new(cli.command.name(), args, serde_json::to_value(&cfg)?, cfg.seed);
    let mut ctx = Ctx { out_dir: cfg.output_dir.clone(), cfg, manifest };
    if let Some(p) = ctx.cfg.paths.prompts.clone() {
        ctx.input(&p)?;
    }
    match &cli.command {
        Command::Parse(a) => parse(&mut ctx, a),
        Command::Validate(a) => validate_inputs(&mut ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&mut ctx, a),
        Command::Refine(a) => refine(&mut ctx, a),
        Command::AlignLoss(a) => align_loss(&mut ctx, a),
        Command::PriorBuild(_) => prior_build(&mut ctx),
        Command::Prefs => prefs(&mut ctx),
        Command::AvgCheckpoints(a) => avg_checkpoints(&mut ctx, a),
        Command::Stats => stats(&mut ctx),
        Command::Diagnose(a) => diagnose(&mut ctx, a),
    }?;
    ctx.manifest.finish();
    let mut body = serde_json::to_string_pretty(&ctx.manifest)?;
    body.push('\n');
    std::fs::write(ctx.out(MANIFEST_FILE), body)?;
    Ok(())
}

fn read_raw(ctx: &mut Ctx, path: &Path) -> Result<Vec<RawOutput>, CliError> {
    ctx.input(path)?;
    read_jsonl_path(path).map_err(|e| CliError::data(path.display(), e))
}

#[derive(Serialize)]
struct RouteRecord<'a> {
    example_id: &'a str,
    route: RecoveryRoute,
    annotations: usize,
    dropped_entries: usize,
}

#[derive(Serialize)]
struct ParseReport<'a> {
    outputs: usize,
    routes: BTreeMap<RecoveryRoute, usize>,
    per_example: Vec<RouteRecord<'a>>,
}

fn parse(ctx: &mut Ctx, a: &RawArgs) -> Result<(), CliError> {
    let raw = read_raw(ctx, &a.raw)?;
    let outcomes: Vec<_> = raw.par_iter().map(|r| recover(&r.text, &r.example_id)).collect();
    let mut routes: BTreeMap<RecoveryRoute, usize> = RecoveryRoute::ALL.iter().map(|&r| (r, 0)).collect();
    for o in &outcomes {
        *routes.entry(o.route).or_default() += 1;
    }
    let per_example = raw
        .iter()
        .zip(&outcomes)
        .map(|(r, o)| RouteRecord {
            example_id: &r.example_id,
            route: o.route,
            annotations: o.prediction.len(),
            dropped_entries: o.dropped_entries,
        })
        .collect();
    let predictions: Vec<&PredictionSet> = outcomes.iter().map(|o| &o.prediction).collect();
    ctx.jsonl("predictions.jsonl", &predictions)?;
    ctx.json("parse_report.json", &ParseReport { outputs: raw.len(), routes, per_example })
}

#[derive(Debug, Serialize)]
struct Issue {
    source: &'static str,
    example_id: String,
    kind: &'static str,
    detail: String,
}

#[derive(Debug, Default, Serialize)]
struct ValidationSummary {
    gold_examples: Option<usize>,
    predictions: Option<usize>,
    issues_by_kind: BTreeMap<&'static str, usize>,
    issues: Vec<Issue>,
}

fn label_issues(source: &'static str, pred: &PredictionSet, inv: &LabelInventory, out: &mut Vec<Issue>) {
    let id = pred.example_id();
    let report = validate(pred, inv);
    let issue = |kind, detail: String| Issue { source, example_id: id.to_string(), kind, detail };
    out.extend(report.unknown_codes.into_iter().map(|c| issue("unknown_code", c)));
    out.extend(report.unknown_sub_codes.into_iter().map(|s| issue("unknown_sub_code", s)));
    out.extend(report.invalid_pairs.into_iter().map(|(c, s)| issue("invalid_pair", format!("{c}/{s}"))));
}

fn validate_inputs(ctx: &mut Ctx, a: &ValidateArgs) -> Result<(), CliError> {
    let inv = ctx.inventory()?;
    let mut summary = ValidationSummary::default();
    let mut issues = Vec::new();
    let gold_path = ctx.cfg.paths.gold.clone();
    let pred_path = ctx.cfg.paths.predictions.clone();
    if gold_path.is_none() && pred_path.is_none() {
        return Err(CliError::Usage("validate needs a gold or a predictions file".into()));
    }
    let mut gold_ids = None;
    if let Some(p) = gold_path {
        let gold = ctx.gold_at(&require(Some(&p), "gold")?)?;
        for g in &gold {
            label_issues("gold", &PredictionSet::valid(g.example_id.clone(), g.annotations.clone()), &inv, &mut issues);
            for span in g.ungrounded_spans() {
                issues.push(Issue {
                    source: "gold",
                    example_id: g.example_id.clone(),
                    kind: "ungrounded_span",
                    detail: span.span.clone(),
                });
            }
        }
        summary.gold_examples = Some(gold.len());
        gold_ids = Some(gold.into_iter().map(|g| g.example_id).collect::<HashSet<_>>());
    }
    if let Some(p) = pred_path {
        let path = require(Some(&p), "predictions")?;
        let preds = ctx.predictions_at(&path)?;
        let mut seen = HashSet::new();
        for pred in &preds {
            let id = pred.example_id().to_string();
            let issue = |kind, detail: String| Issue { source: "predictions", example_id: id.clone(), kind, detail };
            if !seen.insert(pred.example_id()) {
                issues.push(issue("duplicate_id", String::new()));
            }
            if pred.parse_status() == ParseStatus::Invalid {
                issues.push(issue("invalid_json", String::new()));
            }
            if gold_ids.as_ref().is_some_and(|ids| !ids.contains(pred.example_id())) {
                issues.push(issue("missing_gold", String::new()));
            }
            label_issues("predictions", pred, &inv, &mut issues);
        }
        summary.predictions = Some(preds.len());
    }
    for i in &issues {
        *summary.issues_by_kind.entry(i.kind).or_default() += 1;
    }
    let n = issues.len();
    summary.issues = issues;
    ctx.json("validation.json", &summary)?;
    if a.strict && n > 0 {
        return Err(CliError::Data(format!("{n} validation issues; see validation.json")));
    }
    Ok(())
}

fn score_row(name: &str, s: &LevelScores) -> Vec<String> {
    vec![
        name.to_string(),
        format!("{:.2}", s.precision),
        format!("{:.2}", s.recall),
        format!("{:.2}", s.f1),
        s.tp.to_string(),
        s.fp.to_string(),
        s.fn_.to_string(),
    ]
}

fn evaluate_cmd(ctx: &mut Ctx, a: &EvaluateArgs) -> Result<(), CliError> {
    let inv = ctx.inventory()?;
    let gold = ctx.gold()?;
    let pred_path = require(ctx.cfg.paths.predictions.as_ref(), "predictions")?;
    let preds = ctx.predictions_at(&pred_path)?;
    let train_counts = match ctx.cfg.paths.train_gold.clone() {
        Some(p) => Some(pair_frequencies(&ctx.gold_at(&require(Some(&p), "train gold")?)?)),
        None => None,
    };
    let report = evaluate(&preds, &gold, &inv, a.span_threshold)?;
    let opts = TaxonomyOptions { span_threshold: a.span_threshold, train_counts, ..TaxonomyOptions::default() };
    let taxonomy = error_taxonomy(&preds, &gold, &inv, &opts)?;

    ctx.json("metrics.json", &report)?;
    let table = report.table();
    ctx.table("metrics", &table)?;
    ctx.json("taxonomy.json", &taxonomy)?;
    let t = &taxonomy;
    let mut rows = vec![["category", "denominator", "percent"].map(String::from).to_vec()];
    let cats: [(&str, &str, f64); 15] = [
        ("code_confusion", "examples", t.code_confusion),
        ("sub_code_confusion", "examples", t.sub_code_confusion),
        ("missing_annotation", "examples", t.missing_annotation),
        ("over_extraction", "examples", t.over_extraction),
        ("evidence_boundary_error", "examples", t.evidence_boundary_error),
        ("malformed_json", "examples", t.malformed_json),
        ("adjacent_label_confusion", "examples", t.adjacent_label_confusion),
        ("invalid_ontology_label", "predictions", t.invalid_ontology_label),
        ("invalid_pair", "predictions", t.invalid_pair),
        ("parent_sub_code_mismatch", "predictions", t.parent_sub_code_mismatch),
        ("rare_label_omission", "rare gold instances", t.rare_label_omission),
        ("boundary_drift", "pair matches", t.boundary_drift),
        ("wrong_evidence_phrase", "pair matches", t.wrong_evidence_phrase),
        ("no_evidence_span", "pair matches", t.no_evidence_span),
        ("correct_pairs", "count", t.correct_pairs as f64),
    ];
    for (name, den, v) in cats {
        rows.push(vec![name.into(), den.into(), format!("{v:.2}")]);
    }
    ctx.table("taxonomy", &rows)?;
    let mut per_code = vec![table[0].iter().map(|h| if h == "level" { "code".to_string() } else { h.clone() }).collect()];
    per_code.extend(t.per_code.iter().map(|(code, s)| score_row(code, s)));
    ctx.table("per_code", &per_code)?;
    print!("{}", markdown(&table));
    Ok(())
}

/// Counts generation calls and failures across a run.
struct Tally<'a> {
    inner: &'a dyn TextGenerator,
    calls: AtomicUsize,
    failures: AtomicUsize,
}

impl TextGenerator for Tally<'_> {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let out = self.inner.generate(req);
        if out.is_err() {
            self.failures.fetch_add(1, Ordering::SeqCst);
        }
        out
    }
}

/// Single greedy extraction; a failed request yields an invalid set.
fn greedy(example: &ExampleText, client: &dyn TextGenerator, cfg: &RefinementConfig) -> PredictionSet {
    let p = &cfg.prompts;
    let mut messages = Vec::with_capacity(2);
    if !p.system.is_empty() {
        messages.push(Message::system(p.system.clone()));
    }
    messages.push(Message::user(PromptTemplates::render(&p.extraction, example, "")));
    let invalid = || PredictionSet::invalid(example.example_id.clone());
    match client.generate(&GenerationRequest::greedy(messages, cfg.max_tokens)) {
        Ok(resp) => resp.texts.first().map_or_else(invalid, |t| dedup(&recover(t, &example.example_id).prediction)),
        Err(e) => {
            log::warn!("{}: greedy generation failed: {e}", example.example_id);
            invalid()
        }
    }
}

fn by_id(preds: Vec<PredictionSet>, path: &Path) -> Result<HashMap<String, PredictionSet>, CliError> {
    unique_ids(preds.iter().map(PredictionSet::example_id), path)?;
    Ok(preds.into_iter().map(|p| (p.example_id().to_string(), p)).collect())
}

#[derive(Serialize, Deserialize)]
struct ProvenanceRecord {
    example_id: String,
    method: String,
    stages: Vec<String>,
    generation_calls: usize,
}

#[derive(Serialize)]
struct RefineSummary {
    method: String,
    examples: usize,
    generation_calls: usize,
    generation_failures: usize,
    invalid_predictions: usize,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::CotSr => "cot-sr",
        Method::SelfConsistency => "self-consistency",
        Method::Hybrid => "hybrid",
        Method::Selector => "selector",
        Method::Cgra => "cgra",
        Method::SeedMerge => "seed-merge",
        Method::Rerank => "rerank",
    }
}

fn refine(ctx: &mut Ctx, a: &RefineArgs) -> Result<(), CliError> {
    let examples_path = require(a.examples.as_ref().or(ctx.cfg.paths.gold.as_ref()), "examples")?;
    ctx.input(&examples_path)?;
    let examples: Vec<ExampleText> =
        read_jsonl_path(&examples_path).map_err(|e| CliError::data(examples_path.display(), e))?;
    unique_ids(examples.iter().map(|e| e.example_id.as_str()), &examples_path)?;
    let cfg = ctx.cfg.refinement.clone();
    let inventory = if a.method == Method::Rerank { Some(ctx.inventory()?) } else { None };
    let baseline = match &a.baseline {
        Some(p) => Some(by_id(ctx.predictions_at(p)?, p)?),
        None => None,
    };
    let mut seeds = Vec::new();
    if a.method == Method::SeedMerge {
        if a.seed_predictions.len() < 2 {
            return Err(CliError::Usage("seed-merge needs at least 2 --seed-predictions files".into()));
        }
        for p in &a.seed_predictions {
            seeds.push(by_id(ctx.predictions_at(p)?, p)?);
        }
    }
    let client = if a.method == Method::SeedMerge {
        None
    } else {
        if let Some(script) = ctx.cfg.gateway.mock_script.clone() {
            ctx.input(&require(Some(&script), "mock script")?)?;
        }
        Some(ctx.cfg.gateway.build()?)
    };
    let tally = client.as_deref().map(|inner| Tally { inner, calls: AtomicUsize::new(0), failures: AtomicUsize::new(0) });
    let seed0 = ctx.cfg.seed;

    let run_one = |i: usize, ex: &ExampleText| -> Result<Refinement, CliError> {
        let seed = Some(seed0.wrapping_add(i as u64));
        let id = ex.example_id.as_str();
        let client = tally.as_ref().map(|t| t as &dyn TextGenerator);
        let baseline_of = |client: &dyn TextGenerator| -> Result<(PredictionSet, usize), CliError> {
            match &baseline {
                Some(map) => map
                    .get(id)
                    .map(|p| (dedup(p), 0))
                    .ok_or_else(|| CliError::Data(format!("baseline has no prediction for {id}"))),
                None => Ok((greedy(ex, client, &cfg), 1)),
            }
        };
        let refined = match a.method {
            Method::SeedMerge => {
                let sets: Vec<PredictionSet> = seeds
                    .iter()
                    .map(|m| m.get(id).cloned().unwrap_or_else(|| PredictionSet::invalid(id)))
                    .collect();
                seed_merge(&sets, &cfg)?
            }
            method => {
                let client = client.expect("generation methods build a client");
                match method {
                    Method::CotSr => cot_sr(ex, client, &cfg, seed)?,
                    Method::SelfConsistency => self_consistency_generate(ex, client, &cfg, seed)?,
                    Method::Hybrid => {
                        let (base, calls) = baseline_of(client)?;
                        let sc = self_consistency_generate(ex, client, &cfg, seed)?;
                        let mut r = hybrid_mild(&base, &sc.prediction, cfg.hybrid_threshold);
                        r.generation_calls = calls + sc.generation_calls;
                        r
                    }
                    Method::Selector => {
                        let cot = cot_sr(ex, client, &cfg, seed)?;
                        let sc = self_consistency_generate(ex, client, &cfg, seed)?;
                        let mut r = selector(&cot.prediction, &sc.prediction, &ex.context);
                        r.generation_calls = cot.generation_calls + sc.generation_calls;
                        r
                    }
                    Method::Cgra => {
                        let (base, calls) = baseline_of(client)?;
                        let mut r = cgra(&base, &ex.context, ex, client, &cfg, seed)?;
                        r.generation_calls += calls;
                        r
                    }
                    Method::Rerank => {
                        let (base, calls) = baseline_of(client)?;
                        let cot = cot_sr(ex, client, &cfg, seed)?;
                        let sc = self_consistency_generate(ex, client, &cfg, seed)?;
                        let total = calls + cot.generation_calls + sc.generation_calls;
                        let candidates = [
                            CandidateSet { source: CandidateSource::Greedy, prediction: base },
                            CandidateSet { source: CandidateSource::CotSr, prediction: cot.prediction },
                            CandidateSet { source: CandidateSource::SelfConsistency, prediction: sc.prediction },
                        ];
                        let inv = inventory.as_ref().expect("rerank loads the inventory");
                        let mut r = span_anchored_rerank(&candidates, inv, &ex.context, &cfg)?;
                        r.generation_calls = total;
                        r
                    }
                    Method::SeedMerge => unreachable!(),
                }
            }
        };
        Ok(refined)
    };
    let results: Vec<Refinement> =
        examples.par_iter().enumerate().map(|(i, ex)| run_one(i, ex)).collect::<Result<_, _>>()?;

    let (calls, failures) = tally
        .as_ref()
        .map_or((0, 0), |t| (t.calls.load(Ordering::SeqCst), t.failures.load(Ordering::SeqCst)));
    if calls > 0 && failures == calls {
        return Err(CliError::Service(format!("all {calls} generation requests failed")));
    }
    let method = method_name(a.method).to_string();
    let provenance: Vec<ProvenanceRecord> = results
        .iter()
        .map(|r| ProvenanceRecord {
            example_id: r.prediction.example_id().to_string(),
            method: method.clone(),
            stages: r.provenance.clone(),
            generation_calls: r.generation_calls,
        })
        .collect();
    let predictions: Vec<&PredictionSet> = results.iter().map(|r| &r.prediction).collect();
    ctx.jsonl("predictions.jsonl", &predictions)?;
    ctx.jsonl("provenance.jsonl", &provenance)?;
    let summary = RefineSummary {
        method,
        examples: results.len(),
        generation_calls: calls,
        generation_failures: failures,
        invalid_predictions: results.iter().filter(|r| r.prediction.is_invalid()).count(),
    };
    ctx.json("refine_summary.json", &summary)
}

/// Label-similarity prior with the inventory keys naming its rows.
#[derive(Debug, Serialize, Deserialize)]
pub struct PriorFile {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

fn load_prior(path: &Path, inv: &LabelInventory) -> Result<PriorMatrix<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    let file: PriorFile = serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))?;
    let keys: Vec<String> = inv.labels().iter().map(|l| l.key()).collect();
    if file.labels != keys {
        return Err(CliError::Data(format!("{}: labels do not match the inventory", path.display())));
    }
    let m = Matrix::from_rows(&file.matrix)
        .ok_or_else(|| CliError::Data(format!("{}: ragged matrix", path.display())))?;
    PriorMatrix::new(m).map_err(|e| CliError::data(path.display(), e))
}

#[derive(Serialize)]
struct ExampleLoss<'a> {
    example_id: &'a str,
    ont_loss: f64,
}

#[derive(Serialize)]
struct AlignLossReport<'a> {
    prior: &'static str,
    bank_size: usize,
    examples: usize,
    mean_ont_loss: f64,
    breakdown: Option<TrainingLossBreakdown<f64>>,
    per_example: Vec<ExampleLoss<'a>>,
}

fn align_loss(ctx: &mut Ctx, a: &AlignLossArgs) -> Result<(), CliError> {
    let inv = ctx.inventory()?;
    let gold = ctx.gold()?;
    let reps_path = require(ctx.cfg.paths.representations.as_ref(), "representations")?;
    let gold_by_id: HashMap<&str, &GoldExample> = gold.iter().map(|g| (g.example_id.as_str(), g)).collect();
    let load = |ctx: &mut Ctx, path: &Path| -> Result<Vec<(RepresentationVector<f64>, OntologyVector)>, CliError> {
        ctx.input(path)?;
        let raw: Vec<RepresentationVector<f64>> =
            read_jsonl_path(path).map_err(|e| CliError::data(path.display(), e))?;
        raw.into_iter()
            .map(|r| {
                let g = gold_by_id
                    .get(r.example_id.as_str())
                    .ok_or_else(|| CliError::Data(format!("no gold example for representation {}", r.example_id)))?;
                let pairs: Vec<(&str, &str)> = g.annotations.iter().map(|a| a.pair()).collect();
                let ont = build_ontology_vector(&inv, &pairs).map_err(|e| CliError::data(&g.example_id, e))?;
                Ok((RepresentationVector::new(r.example_id, r.values)?, ont))
            })
            .collect()
    };
    let batch = load(ctx, &reps_path)?;
    let bank_entries = match &a.bank {
        Some(p) => load(ctx, &require(Some(p), "bank")?)?,
        None => batch.clone(),
    };
    let bank = MemoryBank::prefill(bank_entries)?;
    let (prior, prior_kind) = match &a.prior {
        Some(p) => {
            let p = require(Some(p), "prior")?;
            ctx.input(&p)?;
            (load_prior(&p, &inv)?, "file")
        }
        None => (PriorMatrix::identity(inv.dim()), "identity"),
    };
    let losses = alignment_losses(&batch, &bank, &prior, &ctx.cfg.alignment)?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let breakdown = a.sft_loss.map(|s| total_loss(s, mean, ctx.cfg.alignment.lambda_ont)).transpose()?;
    let per_example: Vec<ExampleLoss> = batch
        .iter()
        .zip(&losses)
        .map(|((r, _), &l)| ExampleLoss { example_id: &r.example_id, ont_loss: l })
        .collect();
    let mut rows = vec![vec!["example_id".to_string(), "ont_loss".to_string()]];
    rows.extend(per_example.iter().map(|e| vec![e.example_id.to_string(), format!("{:.6}", e.ont_loss)]));
    let report =
        AlignLossReport { prior: prior_kind, bank_size: bank.len(), examples: batch.len(), mean_ont_loss: mean, breakdown, per_example };
    ctx.json("align_loss.json", &report)?;
    ctx.table("align_loss", &rows)
}

fn prior_build(ctx: &mut Ctx) -> Result<(), CliError> {
    let inv = ctx.inventory()?;
    let path = require(ctx.cfg.paths.embeddings.as_ref(), "embeddings")?;
    ctx.input(&path)?;
    let file = std::fs::File::open(&path).map_err(|e| CliError::data(path.display(), e))?;
    let embeddings = read_embeddings::<f64>(&inv, BufReader::new(file)).map_err(|e| CliError::data(path.display(), e))?;
    let prior = build_prior(&inv, &embeddings)?;
    let labels: Vec<String> = inv.labels().iter().map(|l| l.key()).collect();
    let matrix = prior.matrix().to_rows();
    let mut rows = vec![std::iter::once("label".to_string()).chain(labels.iter().cloned()).collect::<Vec<_>>()];
    for (label, row) in labels.iter().zip(&matrix) {
        rows.push(std::iter::once(label.clone()).chain(row.iter().map(|v| format!("{v:.4}"))).collect());
    }
    ctx.json("prior.json", &PriorFile { labels, matrix })?;
    ctx.table("prior", &rows)
}

#[derive(Serialize)]
struct PrefsSummary {
    pairs: usize,
    per_kind: BTreeMap<CorruptionKind, usize>,
}

fn prefs(ctx: &mut Ctx) -> Result<(), CliError> {
    let inv = ctx.inventory()?;
    let gold = ctx.gold()?;
    let pairs = generate_preference_pairs(&gold, &inv, ctx.cfg.seed)?;
    let mut per_kind: BTreeMap<CorruptionKind, usize> = CorruptionKind::ALL.iter().map(|&k| (k, 0)).collect();
    for p in &pairs {
        *per_kind.entry(p.corruption_kind).or_default() += 1;
    }
    ctx.jsonl("preference_pairs.jsonl", &pairs)?;
    ctx.json("prefs_summary.json", &PrefsSummary { pairs: pairs.len(), per_kind })
}

#[derive(Serialize)]
struct AverageSummary<'a> {
    inputs: usize,
    entries: usize,
    parameters: usize,
    dtype: &'static str,
    output: &'a str,
}

fn avg_checkpoints(ctx: &mut Ctx, a: &AvgArgs) -> Result<(), CliError> {
    if Path::new(&a.output).file_name().map(|n| n.to_string_lossy() != a.output.as_str()).unwrap_or(true) {
        return Err(CliError::Usage(format!("--output must be a plain file name, got {:?}", a.output)));
    }
    let mut maps = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let p = require(Some(p), "checkpoint")?;
        ctx.input(&p)?;
        maps.push(NamedVectorMap::<f64>::read_path(&p).map_err(|e| CliError::data(p.display(), e))?);
    }
    let avg = average_named_vectors(&maps)?;
    let out = ctx.out(&a.output);
    let dtype = match a.dtype {
        Dtype::F64 => {
            avg.write_path(&out)?;
            "f64"
        }
        Dtype::F32 => {
            let narrow = avg.entries.iter().map(|(k, v)| (k.clone(), v.iter().map(|&x| x as f32).collect())).collect();
            NamedVectorMap::<f32>::new(narrow).write_path(&out)?;
            "f32"
        }
    };
    ctx.emitted(&a.output)?;
    let summary = AverageSummary {
        inputs: maps.len(),
        entries: avg.len(),
        parameters: avg.entries.values().map(Vec::len).sum(),
        dtype,
        output: &a.output,
    };
    ctx.json("avg_summary.json", &summary)
}

fn stats(ctx: &mut Ctx) -> Result<(), CliError> {
    let inv = ctx.inventory()?;
    let gold = ctx.gold()?;
    let s = corpus_stats(&gold, &inv);
    ctx.json("corpus_stats.json", &s)?;
    let mut rows = vec![["label", "count", "percent"].map(String::from).to_vec()];
    for (label, f) in s.per_code.iter().chain(&s.per_sub_code) {
        rows.push(vec![label.clone(), f.count.to_string(), format!("{:.2}", f.percent)]);
    }
    ctx.table("corpus_labels", &rows)?;
    let summary = vec![
        vec!["statistic".to_string(), "value".to_string()],
        vec!["examples".into(), s.examples.to_string()],
        vec!["annotations".into(), s.annotations.to_string()],
        vec!["annotations per example (mean)".into(), format!("{:.2}", s.annotations_per_example.mean)],
        vec!["annotations per example (median)".into(), format!("{}", s.annotations_per_example.median)],
        vec!["span tokens (mean)".into(), format!("{:.2}", s.span_tokens.mean)],
        vec!["span tokens (median)".into(), format!("{}", s.span_tokens.median)],
        vec!["span tokens (IQR)".into(), format!("{}", s.span_tokens.iqr)],
        vec!["observed pairs".into(), s.observed_pairs.to_string()],
    ];
    print!("{}", markdown(&summary));
    ctx.table("corpus_summary", &summary)
}

fn diagnose(ctx: &mut Ctx, a: &RawArgs) -> Result<(), CliError> {
    let inv = ctx.inventory()?;
    let raw = read_raw(ctx, &a.raw)?;
    let d = schema_diagnostics(&raw, &inv);
    ctx.json("diagnostics.json", &d)?;
    let mut rows = vec![vec!["metric".to_string(), "value".to_string()]];
    rows.push(vec!["outputs".into(), d.outputs.to_string()]);
    rows.push(vec!["annotations".into(), d.annotations.to_string()]);
    rows.push(vec!["invalid JSON (%)".into(), format!("{:.2}", d.invalid_json_rate)]);
    rows.push(vec!["empty output (%)".into(), format!("{:.2}", d.empty_output_rate)]);
    rows.push(vec!["invalid label (%)".into(), format!("{:.2}", d.invalid_label_rate)]);
    rows.push(vec!["invalid pair (%)".into(), format!("{:.2}", d.invalid_pair_rate)]);
    for (route, n) in &d.routes {
        rows.push(vec![format!("route {}", route.as_str()), n.to_string()]);
    }
    ctx.table("diagnostics", &rows)
}
