//! Field-to-metric wiring, run scoring, k-fold protocol, fold aggregation,
//! report rendering and annotator agreement.
//!
//! Scoring strategies live behind [`FieldScorer`] and [`GenerationScorer`]
//! and are looked up by name in a [`ScorerRegistry`]; a [`FieldMetricPlan`]
//! names which scorer handles each leaf field. All reported values are
//! percentages in `[0, 100]`.
//!
//! Absent fields (the model output did not contain them) are always scored
//! as wrong: booleans count against the gold label, numbers and locations
//! mismatch, type codes compare as the empty set and free text as "".

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    self, bleu4, classification_scores, cohen_kappa, jaccard, rouge_l, rouge_n, text_exact_eq, ConfusionTally,
    MetricError, TokenSeq, Tokenizer,
};
use crate::outparse::ParsedExtraction;
use crate::schema::{canonical_json_unchecked, FieldKind, FieldPath, FieldValue, GoldRecord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("length mismatch: {preds} predictions, {golds} golds, {raws} raw outputs")]
    LengthMismatch { preds: usize, golds: usize, raws: usize },
    #[error("record {index}: expected id {expected:?}, found {found:?}")]
    IdMisalignment { index: usize, expected: String, found: String },
    #[error("reports do not share the same plan")]
    PlanMismatch,
    #[error("no reports to aggregate")]
    EmptyInput,
    #[error("unknown scorer or tokenizer {0:?}")]
    UnknownScorer(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{n} records cannot fill {k} folds")]
    TooFewRecords { n: usize, k: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Recall,
    F1,
    Emr,
    Jaccard,
    Cosine,
    Bleu4,
    Rouge1,
    Rouge2,
    RougeL,
    Kappa,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Recall => "recall",
            MetricKind::F1 => "f1",
            MetricKind::Emr => "emr",
            MetricKind::Jaccard => "jaccard",
            MetricKind::Cosine => "cosine",
            MetricKind::Bleu4 => "bleu4",
            MetricKind::Rouge1 => "rouge1",
            MetricKind::Rouge2 => "rouge2",
            MetricKind::RougeL => "rouge_l",
            MetricKind::Kappa => "kappa",
        }
    }

    pub fn parse(s: &str) -> Option<MetricKind> {
        use MetricKind::*;
        [Accuracy, Recall, F1, Emr, Jaccard, Cosine, Bleu4, Rouge1, Rouge2, RougeL, Kappa]
            .into_iter()
            .find(|m| m.as_str() == s)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A metric result: a value, or the reason it is undefined.
pub type Scored = Result<f64, String>;

/// Generation-level entries use this in place of a field path.
pub const GENERATION_FIELD: &str = "generation";
pub const POOLED_FIELD: &str = "pooled";

pub struct ScoreContext<'a> {
    pub tokenizer: &'a dyn Tokenizer,
}

/// A per-field scoring strategy.
pub trait FieldScorer: Send + Sync {
    fn name(&self) -> &'static str;
    fn metrics(&self) -> &'static [MetricKind];
    fn accepts(&self, kind: FieldKind) -> bool;
    /// `pairs` holds (prediction or None when absent, gold).
    fn score(&self, ctx: &ScoreContext<'_>, pairs: &[(Option<&FieldValue>, &FieldValue)]) -> Vec<(MetricKind, Scored)>;
}

/// A whole-output text similarity strategy.
pub trait GenerationScorer: Send + Sync {
    fn name(&self) -> &'static str;
    fn metrics(&self) -> &'static [MetricKind];
    fn score(&self, pairs: &[(TokenSeq, TokenSeq)]) -> Vec<(MetricKind, Scored)>;
}

fn undefined_all(metrics: &[MetricKind], why: &str) -> Vec<(MetricKind, Scored)> {
    metrics.iter().map(|m| (*m, Err(why.to_string()))).collect()
}

fn pct(x: f64) -> f64 {
    x * 100.0
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Accuracy, recall and F1 with `true` as the positive class.
pub struct ClassificationScorer;

impl FieldScorer for ClassificationScorer {
    fn name(&self) -> &'static str {
        "classification"
    }

    fn metrics(&self) -> &'static [MetricKind] {
        &[MetricKind::Accuracy, MetricKind::Recall, MetricKind::F1]
    }

    fn accepts(&self, kind: FieldKind) -> bool {
        kind == FieldKind::Bool
    }

    fn score(&self, _: &ScoreContext<'_>, pairs: &[(Option<&FieldValue>, &FieldValue)]) -> Vec<(MetricKind, Scored)> {
        let mut tally = ConfusionTally::default();
        for (pred, gold) in pairs {
            let FieldValue::Bool(actual) = gold else { continue };
            let predicted = match pred {
                Some(FieldValue::Bool(p)) => *p,
                _ => !*actual,
            };
            tally.record(predicted, *actual);
        }
        match classification_scores(&tally) {
            Ok(s) => vec![
                (MetricKind::Accuracy, Ok(pct(s.accuracy))),
                (MetricKind::Recall, Ok(pct(s.recall))),
                (MetricKind::F1, Ok(pct(s.f1))),
            ],
            Err(e) => undefined_all(self.metrics(), &e.to_string()),
        }
    }
}

/// Exact match rate for numbers and location names.
pub struct ExactMatchScorer;

fn exact_eq(pred: &FieldValue, gold: &FieldValue) -> bool {
    match (pred, gold) {
        (FieldValue::Text(p), FieldValue::Text(g)) => text_exact_eq(p, g),
        (FieldValue::Count(p), FieldValue::Count(g)) => p == g,
        (FieldValue::Amount(p), FieldValue::Amount(g)) => p == g,
        (FieldValue::Bool(p), FieldValue::Bool(g)) => p == g,
        _ => false,
    }
}

impl FieldScorer for ExactMatchScorer {
    fn name(&self) -> &'static str {
        "exact_match"
    }

    fn metrics(&self) -> &'static [MetricKind] {
        &[MetricKind::Emr]
    }

    fn accepts(&self, kind: FieldKind) -> bool {
        matches!(kind, FieldKind::Count | FieldKind::Amount | FieldKind::Location | FieldKind::Text | FieldKind::Bool)
    }

    fn score(&self, _: &ScoreContext<'_>, pairs: &[(Option<&FieldValue>, &FieldValue)]) -> Vec<(MetricKind, Scored)> {
        let preds: Vec<Option<&FieldValue>> = pairs.iter().map(|(p, _)| *p).collect();
        let golds: Vec<Option<&FieldValue>> = pairs.iter().map(|(_, g)| Some(*g)).collect();
        let r = metrics::emr(&preds, &golds, |p, g| match (p, g) {
            (Some(p), Some(g)) => exact_eq(p, g),
            _ => false,
        });
        vec![(MetricKind::Emr, r.map_err(|e| e.to_string()))]
    }
}

/// Mean per-sample Jaccard similarity of code sets.
pub struct JaccardScorer;

fn code_set(v: Option<&FieldValue>) -> BTreeSet<String> {
    match v {
        Some(FieldValue::Codes(c)) => c.iter().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

impl FieldScorer for JaccardScorer {
    fn name(&self) -> &'static str {
        "jaccard"
    }

    fn metrics(&self) -> &'static [MetricKind] {
        &[MetricKind::Jaccard]
    }

    fn accepts(&self, kind: FieldKind) -> bool {
        kind == FieldKind::Codes
    }

    fn score(&self, _: &ScoreContext<'_>, pairs: &[(Option<&FieldValue>, &FieldValue)]) -> Vec<(MetricKind, Scored)> {
        let m = mean(pairs.iter().map(|(p, g)| jaccard(&code_set(*p), &code_set(Some(*g)))));
        vec![(MetricKind::Jaccard, m.map(pct).ok_or_else(|| "no samples".to_string()))]
    }
}

/// Mean per-sample TF-IDF cosine, idf fitted over the field's texts in this run.
pub struct TfIdfCosineScorer;

fn text_of(v: Option<&FieldValue>) -> String {
    match v {
        Some(FieldValue::Text(s)) => s.clone(),
        _ => String::new(),
    }
}

impl FieldScorer for TfIdfCosineScorer {
    fn name(&self) -> &'static str {
        "tfidf_cosine"
    }

    fn metrics(&self) -> &'static [MetricKind] {
        &[MetricKind::Cosine]
    }

    fn accepts(&self, kind: FieldKind) -> bool {
        matches!(kind, FieldKind::Text | FieldKind::Location)
    }

    fn score(&self, ctx: &ScoreContext<'_>, pairs: &[(Option<&FieldValue>, &FieldValue)]) -> Vec<(MetricKind, Scored)> {
        let preds: Vec<String> = pairs.iter().map(|(p, _)| text_of(*p)).collect();
        let golds: Vec<String> = pairs.iter().map(|(_, g)| text_of(Some(*g))).collect();
        let r = metrics::tfidf_cosine(&preds, &golds, ctx.tokenizer)
            .map_err(|e| e.to_string())
            .and_then(|sims| mean(sims.into_iter()).ok_or_else(|| "no samples".into()));
        vec![(MetricKind::Cosine, r.map(pct))]
    }
}

/// Corpus-level BLEU-4.
pub struct Bleu4Scorer;

impl GenerationScorer for Bleu4Scorer {
    fn name(&self) -> &'static str {
        "bleu4"
    }

    fn metrics(&self) -> &'static [MetricKind] {
        &[MetricKind::Bleu4]
    }

    fn score(&self, pairs: &[(TokenSeq, TokenSeq)]) -> Vec<(MetricKind, Scored)> {
        vec![(MetricKind::Bleu4, bleu4(pairs).map(|b| b.score).map_err(|e| e.to_string()))]
    }
}

/// Mean per-sample ROUGE-1/2/L F1. An empty candidate scores 0.
pub struct RougeScorer;

impl GenerationScorer for RougeScorer {
    fn name(&self) -> &'static str {
        "rouge"
    }

    fn metrics(&self) -> &'static [MetricKind] {
        &[MetricKind::Rouge1, MetricKind::Rouge2, MetricKind::RougeL]
    }

    fn score(&self, pairs: &[(TokenSeq, TokenSeq)]) -> Vec<(MetricKind, Scored)> {
        if pairs.is_empty() {
            return undefined_all(self.metrics(), "no samples");
        }
        let per_sample = |f: &dyn Fn(&TokenSeq, &TokenSeq) -> Result<metrics::Prf, MetricError>| -> Scored {
            let mut total = 0.0;
            for (c, r) in pairs {
                if c.is_empty() {
                    continue;
                }
                total += f(c, r).map_err(|e| e.to_string())?.f1;
            }
            Ok(pct(total / pairs.len() as f64))
        };
        vec![
            (MetricKind::Rouge1, per_sample(&|c, r| rouge_n(c, r, 1))),
            (MetricKind::Rouge2, per_sample(&|c, r| rouge_n(c, r, 2))),
            (MetricKind::RougeL, per_sample(&|c, r| rouge_l(c, r))),
        ]
    }
}

/// Named scoring strategies and tokenizers.
#[derive(Clone)]
pub struct ScorerRegistry {
    field: BTreeMap<&'static str, Arc<dyn FieldScorer>>,
    generation: BTreeMap<&'static str, Arc<dyn GenerationScorer>>,
    tokenizers: BTreeMap<&'static str, Arc<dyn Tokenizer>>,
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        let mut r = ScorerRegistry::empty();
        r.register_field(ClassificationScorer);
        r.register_field(ExactMatchScorer);
        r.register_field(JaccardScorer);
        r.register_field(TfIdfCosineScorer);
        r.register_generation(Bleu4Scorer);
        r.register_generation(RougeScorer);
        r.register_tokenizer(metrics::CharTokenizer);
        r.register_tokenizer(metrics::WordTokenizer);
        r
    }
}

impl ScorerRegistry {
    pub fn empty() -> Self {
        ScorerRegistry { field: BTreeMap::new(), generation: BTreeMap::new(), tokenizers: BTreeMap::new() }
    }

    pub fn register_field<S: FieldScorer + 'static>(&mut self, scorer: S) {
        self.field.insert(scorer.name(), Arc::new(scorer));
    }

    pub fn register_generation<S: GenerationScorer + 'static>(&mut self, scorer: S) {
        self.generation.insert(scorer.name(), Arc::new(scorer));
    }

    pub fn register_tokenizer<T: Tokenizer + 'static>(&mut self, tokenizer: T) {
        self.tokenizers.insert(tokenizer.name(), Arc::new(tokenizer));
    }

    pub fn field_scorer(&self, name: &str) -> Result<Arc<dyn FieldScorer>, EvalError> {
        self.field.get(name).cloned().ok_or_else(|| EvalError::UnknownScorer(name.into()))
    }

    pub fn generation_scorer(&self, name: &str) -> Result<Arc<dyn GenerationScorer>, EvalError> {
        self.generation.get(name).cloned().ok_or_else(|| EvalError::UnknownScorer(name.into()))
    }

    pub fn tokenizer(&self, name: &str) -> Result<Arc<dyn Tokenizer>, EvalError> {
        self.tokenizers.get(name).cloned().ok_or_else(|| EvalError::UnknownScorer(name.into()))
    }

    pub fn field_scorer_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.field.keys().copied()
    }
}

/// Which scorer handles each of the fifteen fields, plus the
/// generation-level scorers and the tokenizer they share.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMetricPlan {
    pub fields: Vec<(FieldPath, String)>,
    pub generation: Vec<String>,
    pub tokenizer: String,
}

impl Default for FieldMetricPlan {
    fn default() -> Self {
        let fields = FieldPath::ALL
            .into_iter()
            .map(|f| {
                let scorer = match f.kind() {
                    FieldKind::Bool => "classification",
                    FieldKind::Count | FieldKind::Amount | FieldKind::Location => "exact_match",
                    FieldKind::Codes => "jaccard",
                    FieldKind::Text => "tfidf_cosine",
                };
                (f, scorer.to_string())
            })
            .collect();
        FieldMetricPlan { fields, generation: vec!["bleu4".into(), "rouge".into()], tokenizer: "char".into() }
    }
}

impl FieldMetricPlan {
    /// Every field covered exactly once by a registered scorer that accepts it.
    pub fn check(&self, registry: &ScorerRegistry) -> Result<(), EvalError> {
        let mut seen = BTreeSet::new();
        for (field, name) in &self.fields {
            if !seen.insert(*field) {
                return Err(EvalError::InvalidPlan(format!("{field} mapped twice")));
            }
            let scorer = registry.field_scorer(name)?;
            if !scorer.accepts(field.kind()) {
                return Err(EvalError::InvalidPlan(format!("scorer {name} cannot score {field}")));
            }
        }
        if seen.len() != FieldPath::ALL.len() {
            return Err(EvalError::InvalidPlan(format!("{} of 15 fields mapped", seen.len())));
        }
        for name in &self.generation {
            registry.generation_scorer(name)?;
        }
        registry.tokenizer(&self.tokenizer)?;
        Ok(())
    }

    pub fn with_tokenizer(mut self, name: &str) -> Self {
        self.tokenizer = name.to_string();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub field: String,
    pub metric: MetricKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub undefined: Option<String>,
    /// Folds left out of a mean because the metric was undefined there.
    #[serde(default)]
    pub excluded: usize,
}

impl ReportEntry {
    fn new(field: &str, metric: MetricKind, scored: Scored) -> Self {
        let (value, undefined) = match scored {
            Ok(v) => (Some(v), None),
            Err(why) => (None, Some(why)),
        };
        ReportEntry { field: field.to_string(), metric, value, undefined, excluded: 0 }
    }
}

pub const MEAN_OF_FOLDS: &str = "mean-of-folds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fold index, "all", or "mean-of-folds".
    pub fold: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub sample_count: usize,
    pub entries: Vec<ReportEntry>,
    /// Per-field count of predictions lacking that field.
    pub absence: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn get(&self, field: &str, metric: MetricKind) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.field == field && e.metric == metric)
    }

    pub fn value(&self, field: &str, metric: MetricKind) -> Option<f64> {
        self.get(field, metric).and_then(|e| e.value)
    }

    fn key_set(&self) -> Vec<(&str, MetricKind)> {
        self.entries.iter().map(|e| (e.field.as_str(), e.metric)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub record_id: String,
    pub extraction: ParsedExtraction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOutput {
    pub record_id: String,
    pub text: String,
}

/// Scores aligned predictions against gold records.
pub fn score_run(
    preds: &[Prediction],
    golds: &[GoldRecord],
    raw_outputs: &[RawOutput],
    plan: &FieldMetricPlan,
    registry: &ScorerRegistry,
) -> Result<EvalReport, EvalError> {
    if preds.len() != golds.len() || raw_outputs.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len(), raws: raw_outputs.len() });
    }
    for (index, ((p, g), r)) in preds.iter().zip(golds).zip(raw_outputs).enumerate() {
        for found in [&p.record_id, &r.record_id] {
            if *found != g.record_id {
                return Err(EvalError::IdMisalignment { index, expected: g.record_id.clone(), found: found.clone() });
            }
        }
    }
    plan.check(registry)?;
    let tokenizer = registry.tokenizer(&plan.tokenizer)?;
    let ctx = ScoreContext { tokenizer: tokenizer.as_ref() };

    let gold_values: Vec<Vec<FieldValue>> =
        golds.iter().map(|g| FieldPath::ALL.iter().map(|f| g.record.get(*f)).collect()).collect();

    let mut entries = Vec::new();
    let mut absence = BTreeMap::new();
    for (field, scorer_name) in &plan.fields {
        let idx = FieldPath::ALL.iter().position(|f| f == field).expect("field in ALL");
        let pairs: Vec<(Option<&FieldValue>, &FieldValue)> = preds
            .iter()
            .zip(&gold_values)
            .map(|(p, g)| (p.extraction.record.get(*field), &g[idx]))
            .collect();
        absence.insert(field.as_str().to_string(), pairs.iter().filter(|(p, _)| p.is_none()).count());
        let scorer = registry.field_scorer(scorer_name)?;
        let results = if pairs.is_empty() { undefined_all(scorer.metrics(), "no samples") } else { scorer.score(&ctx, &pairs) };
        entries.extend(results.into_iter().map(|(m, s)| ReportEntry::new(field.as_str(), m, s)));
    }

    let gen_pairs: Vec<(TokenSeq, TokenSeq)> = raw_outputs
        .iter()
        .zip(golds)
        .map(|(r, g)| (tokenizer.tokenize(&r.text), tokenizer.tokenize(&canonical_json_unchecked(&g.record))))
        .collect();
    for name in &plan.generation {
        let scorer = registry.generation_scorer(name)?;
        let results = if gen_pairs.is_empty() { undefined_all(scorer.metrics(), "no samples") } else { scorer.score(&gen_pairs) };
        entries.extend(results.into_iter().map(|(m, s)| ReportEntry::new(GENERATION_FIELD, m, s)));
    }

    Ok(EvalReport { fold: "all".into(), seed: None, sample_count: golds.len(), entries, absence })
}

/// Mean as an offset from the first value, so identical inputs return that
/// value unchanged.
fn stable_mean(xs: &[f64]) -> Option<f64> {
    let first = *xs.first()?;
    Some(first + xs.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64)
}

/// Unweighted mean per entry across folds; undefined fold values are left
/// out and counted in `excluded`.
pub fn aggregate_folds(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
    let first = reports.first().ok_or(EvalError::EmptyInput)?;
    let keys = first.key_set();
    if reports.iter().any(|r| r.key_set() != keys) {
        return Err(EvalError::PlanMismatch);
    }
    let entries = first
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let defined: Vec<f64> = reports.iter().filter_map(|r| r.entries[i].value).collect();
            let excluded = reports.len() - defined.len();
            let scored = stable_mean(&defined).ok_or_else(|| "undefined in every fold".to_string());
            ReportEntry { excluded, ..ReportEntry::new(&e.field, e.metric, scored) }
        })
        .collect();
    let mut absence = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.absence {
            *absence.entry(k.clone()).or_insert(0) += v;
        }
    }
    let seed = first.seed.filter(|s| reports.iter().all(|r| r.seed == Some(*s)));
    Ok(EvalReport {
        fold: MEAN_OF_FOLDS.into(),
        seed,
        sample_count: reports.iter().map(|r| r.sample_count).sum(),
        entries,
        absence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<ReportFormat> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Some(ReportFormat::Markdown),
            "csv" => Some(ReportFormat::Csv),
            "json" => Some(ReportFormat::Json),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

/// Boolean table columns.
pub const BOOLEAN_COLUMNS: [(FieldPath, &str); 7] = [
    (FieldPath::DeathsExistence, "Death"),
    (FieldPath::InjuriesExistence, "Injury"),
    (FieldPath::LossesExistence, "Economic loss"),
    (FieldPath::CompletedIllegalAct, "Crime success"),
    (FieldPath::Cybercrime, "Cybercrime"),
    (FieldPath::SocialImpact, "Social impact"),
    (FieldPath::CaseClosure, "Case closure"),
];

pub const EMR_COLUMNS: [(FieldPath, &str); 5] = [
    (FieldPath::DeathsNumber, "The number of deaths"),
    (FieldPath::InjuriesNumber, "The number of injured"),
    (FieldPath::LossesAmount, "The amount of the losses"),
    (FieldPath::Province, "Province"),
    (FieldPath::City, "City"),
];

pub const SIMILARITY_COLUMNS: [(FieldPath, MetricKind, &str); 3] = [
    (FieldPath::TypeCodes, MetricKind::Jaccard, "Case type"),
    (FieldPath::PoliceHandling, MetricKind::Cosine, "Police handling"),
    (FieldPath::IllegalMeans, MetricKind::Cosine, "Criminal methods"),
];

pub const GENERATION_COLUMNS: [(MetricKind, &str); 4] = [
    (MetricKind::Bleu4, "BLEU-4"),
    (MetricKind::Rouge1, "ROUGE-1"),
    (MetricKind::Rouge2, "ROUGE-2"),
    (MetricKind::RougeL, "ROUGE-L"),
];

fn cell(report: &EvalReport, field: &str, metric: MetricKind) -> String {
    match report.get(field, metric) {
        Some(ReportEntry { value: Some(v), .. }) => format!("{v:.2}"),
        Some(_) => "undefined".into(),
        None => "-".into(),
    }
}

fn md_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for row in rows {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out.push('\n');
}

fn render_markdown(report: &EvalReport) -> String {
    let mut out = format!("# Evaluation report ({})\n\n", report.fold);
    out.push_str(&format!("Samples: {}", report.sample_count));
    if let Some(seed) = report.seed {
        out.push_str(&format!(" | fold seed: {seed}"));
    }
    out.push_str("\n\n");

    let mut header = vec!["Evaluation"];
    header.extend(BOOLEAN_COLUMNS.iter().map(|(_, name)| *name));
    let rows: Vec<Vec<String>> = [(MetricKind::Accuracy, "Accuracy(%)"), (MetricKind::Recall, "Recall(%)"), (MetricKind::F1, "F1(%)")]
        .iter()
        .map(|(metric, label)| {
            std::iter::once(label.to_string())
                .chain(BOOLEAN_COLUMNS.iter().map(|(f, _)| cell(report, f.as_str(), *metric)))
                .collect()
        })
        .collect();
    out.push_str("## Boolean fields\n\n");
    md_table(&mut out, &header, &rows);

    let mut header = vec!["Evaluation"];
    header.extend(EMR_COLUMNS.iter().map(|(_, name)| *name));
    let row: Vec<String> = std::iter::once("EMR(%)".to_string())
        .chain(EMR_COLUMNS.iter().map(|(f, _)| cell(report, f.as_str(), MetricKind::Emr)))
        .collect();
    out.push_str("## Numeric and location fields\n\n");
    md_table(&mut out, &header, &[row]);

    let header: Vec<&str> = SIMILARITY_COLUMNS.iter().map(|(_, _, name)| *name).collect();
    let metrics_row = SIMILARITY_COLUMNS
        .iter()
        .map(|(_, m, _)| if *m == MetricKind::Jaccard { "Jaccard Similarity".to_string() } else { "Cosine Similarity".into() })
        .collect();
    let row = SIMILARITY_COLUMNS.iter().map(|(f, m, _)| cell(report, f.as_str(), *m)).collect();
    out.push_str("## Case type and text fields\n\n");
    md_table(&mut out, &header, &[metrics_row, row]);

    let header: Vec<&str> = GENERATION_COLUMNS.iter().map(|(_, name)| *name).collect();
    let row = GENERATION_COLUMNS.iter().map(|(m, _)| cell(report, GENERATION_FIELD, *m)).collect();
    out.push_str("## Generation quality\n\n");
    md_table(&mut out, &header, &[row]);

    let shown: HashSet<(String, MetricKind)> = BOOLEAN_COLUMNS
        .iter()
        .flat_map(|(f, _)| [MetricKind::Accuracy, MetricKind::Recall, MetricKind::F1].map(|m| (f.as_str().to_string(), m)))
        .chain(EMR_COLUMNS.iter().map(|(f, _)| (f.as_str().to_string(), MetricKind::Emr)))
        .chain(SIMILARITY_COLUMNS.iter().map(|(f, m, _)| (f.as_str().to_string(), *m)))
        .chain(GENERATION_COLUMNS.iter().map(|(m, _)| (GENERATION_FIELD.to_string(), *m)))
        .collect();
    let other: Vec<Vec<String>> = report
        .entries
        .iter()
        .filter(|e| !shown.contains(&(e.field.clone(), e.metric)))
        .map(|e| vec![e.field.clone(), e.metric.to_string(), cell(report, &e.field, e.metric)])
        .collect();
    if !other.is_empty() {
        out.push_str("## Other metrics\n\n");
        md_table(&mut out, &["Field", "Metric", "Value"], &other);
    }

    let notes: Vec<Vec<String>> = report
        .entries
        .iter()
        .filter(|e| e.undefined.is_some() || e.excluded > 0)
        .map(|e| {
            vec![
                e.field.clone(),
                e.metric.to_string(),
                e.undefined.clone().unwrap_or_default(),
                e.excluded.to_string(),
            ]
        })
        .collect();
    if !notes.is_empty() {
        out.push_str("## Undefined or partially defined entries\n\n");
        md_table(&mut out, &["Field", "Metric", "Reason", "Excluded folds"], &notes);
    }

    let absent: Vec<Vec<String>> =
        report.absence.iter().filter(|(_, n)| **n > 0).map(|(f, n)| vec![f.clone(), n.to_string()]).collect();
    if !absent.is_empty() {
        out.push_str("## Absent fields\n\n");
        md_table(&mut out, &["Field", "Absent predictions"], &absent);
    }
    out
}

fn render_csv(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fold", "field", "metric", "value", "undefined", "excluded"]).expect("in-memory write");
    for e in &report.entries {
        let value = e.value.map(|v| format!("{v:.2}")).unwrap_or_default();
        w.write_record([
            report.fold.as_str(),
            e.field.as_str(),
            e.metric.as_str(),
            value.as_str(),
            e.undefined.as_deref().unwrap_or(""),
            e.excluded.to_string().as_str(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
    }
}

/// Fold assignment for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
    /// Name of the shuffling generator.
    pub prng: String,
    /// Record ids per fold, in dealing order.
    pub folds: Vec<Vec<String>>,
}

impl FoldSpec {
    pub fn assignments(&self) -> BTreeMap<&str, usize> {
        self.folds
            .iter()
            .enumerate()
            .flat_map(|(i, ids)| ids.iter().map(move |id| (id.as_str(), i)))
            .collect()
    }

    pub fn test_ids(&self, fold: usize) -> Option<&[String]> {
        self.folds.get(fold).map(Vec::as_slice)
    }

    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, ids)| ids.iter().map(String::as_str))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.folds.iter().map(Vec::len).collect()
    }
}

pub const FOLD_PRNG: &str = "chacha8";

/// Shuffles ids with ChaCha8 seeded from `seed`, then deals them round-robin.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<FoldSpec, EvalError> {
    if k < 2 || ids.len() < k {
        return Err(EvalError::TooFewRecords { n: ids.len(), k });
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(EvalError::DuplicateId(dup.clone()));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(ids.len() / k + 1); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldSpec { k, seed, prng: FOLD_PRNG.into(), folds })
}

/// Fields compared for inter-annotator kappa.
pub const KAPPA_FIELDS: [FieldPath; 10] = [
    FieldPath::Cybercrime,
    FieldPath::CompletedIllegalAct,
    FieldPath::CaseClosure,
    FieldPath::DeathsExistence,
    FieldPath::InjuriesExistence,
    FieldPath::LossesExistence,
    FieldPath::SocialImpact,
    FieldPath::Province,
    FieldPath::City,
    FieldPath::TypeCodes,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub record_id: String,
    pub field: FieldPath,
    pub value_a: String,
    pub value_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub record_count: usize,
    pub per_field: Vec<(FieldPath, Option<f64>, Option<String>)>,
    pub pooled: Option<f64>,
    pub pooled_undefined: Option<String>,
    pub disagreements: Vec<Disagreement>,
}

impl AgreementReport {
    pub fn kappa(&self, field: FieldPath) -> Option<f64> {
        self.per_field.iter().find(|(f, _, _)| *f == field).and_then(|(_, k, _)| *k)
    }

    /// As a generic report so it can be rendered or averaged like scores.
    pub fn to_eval_report(&self) -> EvalReport {
        let mut entries: Vec<ReportEntry> = self
            .per_field
            .iter()
            .map(|(f, k, why)| ReportEntry::new(f.as_str(), MetricKind::Kappa, k.ok_or_else(|| why.clone().unwrap_or_default())))
            .collect();
        entries.push(ReportEntry::new(
            POOLED_FIELD,
            MetricKind::Kappa,
            self.pooled.ok_or_else(|| self.pooled_undefined.clone().unwrap_or_default()),
        ));
        EvalReport { fold: "agreement".into(), seed: None, sample_count: self.record_count, entries, absence: BTreeMap::new() }
    }
}

fn kappa_scored(r: Result<f64, MetricError>) -> (Option<f64>, Option<String>) {
    match r {
        Ok(k) => (Some(k), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

/// Per-field and pooled Cohen's kappa between two annotators, plus every
/// field-level disagreement for adjudication.
pub fn annotator_agreement(a: &[GoldRecord], b: &[GoldRecord]) -> Result<AgreementReport, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { preds: a.len(), golds: b.len(), raws: b.len() });
    }
    for (index, (x, y)) in a.iter().zip(b).enumerate() {
        if x.record_id != y.record_id {
            return Err(EvalError::IdMisalignment { index, expected: x.record_id.clone(), found: y.record_id.clone() });
        }
    }
    let label = |g: &GoldRecord, f: FieldPath| {
        let mut v = g.record.get(f);
        if let FieldValue::Codes(c) = &mut v {
            c.sort();
        }
        v.display()
    };
    let per_field = KAPPA_FIELDS
        .iter()
        .map(|f| {
            let la: Vec<String> = a.iter().map(|g| label(g, *f)).collect();
            let lb: Vec<String> = b.iter().map(|g| label(g, *f)).collect();
            let (k, why) = kappa_scored(cohen_kappa(&la, &lb));
            (*f, k, why)
        })
        .collect();
    let bools: Vec<FieldPath> = KAPPA_FIELDS.into_iter().filter(|f| f.kind() == FieldKind::Bool).collect();
    let pool = |set: &[GoldRecord]| -> Vec<String> {
        bools.iter().flat_map(|f| set.iter().map(move |g| label(g, *f))).collect()
    };
    let (pooled, pooled_undefined) = kappa_scored(cohen_kappa(&pool(a), &pool(b)));
    let mut disagreements = Vec::new();
    for (x, y) in a.iter().zip(b) {
        for f in FieldPath::ALL {
            let (va, vb) = (label(x, f), label(y, f));
            if va != vb {
                disagreements.push(Disagreement { record_id: x.record_id.clone(), field: f, value_a: va, value_b: vb });
            }
        }
    }
    Ok(AgreementReport { record_count: a.len(), per_field, pooled, pooled_undefined, disagreements })
}
