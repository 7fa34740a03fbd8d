//! Text-generation and extraction metrics: corpus BLEU-4, ROUGE-1/2/L,
//! confusion-based classification scores, exact match rate, TF-IDF cosine,
//! Jaccard over code sets and Cohen's kappa.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("empty input")]
    EmptyInput,
    #[error("empty reference at pair {0}")]
    EmptyReference(usize),
    #[error("reference has {len} tokens, needs at least {n}")]
    ReferenceTooShort { len: usize, n: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("confusion tally is empty")]
    EmptyTally,
    #[error("chance agreement is 1; kappa is undefined")]
    DegenerateMarginals,
}

/// A tokenized text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(pub Vec<String>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().map(Into::into).collect())
    }
}

/// Splits text into tokens. Implementations are looked up by name.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &'static str;
    fn tokenize(&self, text: &str) -> TokenSeq;
}

/// One token per character, whitespace removed.
#[derive(Debug, Default, Clone, Copy)]
pub struct CharTokenizer;

impl Tokenizer for CharTokenizer {
    fn name(&self) -> &'static str {
        "char"
    }

    fn tokenize(&self, text: &str) -> TokenSeq {
        text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
    }
}

/// Whitespace-separated words.
#[derive(Debug, Default, Clone, Copy)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn name(&self) -> &'static str {
        "word"
    }

    fn tokenize(&self, text: &str) -> TokenSeq {
        text.split_whitespace().collect()
    }
}

/// Looks up a built-in tokenizer by name.
pub fn tokenizer_by_name(name: &str) -> Option<Box<dyn Tokenizer>> {
    match name {
        "char" => Some(Box::new(CharTokenizer)),
        "word" => Some(Box::new(WordTokenizer)),
        _ => None,
    }
}

pub const TOKENIZER_NAMES: [&str; 2] = ["char", "word"];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap between candidate and reference n-gram multisets,
/// plus the candidate and reference n-gram totals.
fn clipped_overlap(candidate: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand.iter().map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0))).sum();
    (overlap, candidate.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuComponents {
    /// Clipped matches per order 1..=4.
    pub matches: [usize; 4],
    /// Candidate n-gram totals per order 1..=4.
    pub totals: [usize; 4],
    pub precisions: [f64; 4],
    pub weights: [f64; 4],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
    /// 0..=100
    pub score: f64,
}

pub const UNIFORM_WEIGHTS: [f64; 4] = [0.25; 4];

pub fn bleu4(pairs: &[(TokenSeq, TokenSeq)]) -> Result<BleuComponents, MetricError> {
    bleu4_weighted(pairs, UNIFORM_WEIGHTS)
}

/// Corpus-level BLEU-4: clipped counts and lengths are summed over all pairs
/// before dividing. No smoothing; any zero precision gives a score of 0.
pub fn bleu4_weighted(pairs: &[(TokenSeq, TokenSeq)], weights: [f64; 4]) -> Result<BleuComponents, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (i, (cand, reference)) in pairs.iter().enumerate() {
        if reference.is_empty() {
            return Err(MetricError::EmptyReference(i));
        }
        c += cand.len();
        r += reference.len();
        for n in 1..=4 {
            let (m, t, _) = clipped_overlap(cand.tokens(), reference.tokens(), n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    let mut precisions = [0f64; 4];
    for i in 0..4 {
        precisions[i] = if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 };
    }
    // An empty candidate corpus has no defined penalty; it scores 0 regardless.
    let brevity_penalty = if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_sum: f64 = precisions.iter().zip(weights).map(|(p, w)| w * p.ln()).sum();
        brevity_penalty * log_sum.exp() * 100.0
    };
    Ok(BleuComponents {
        matches,
        totals,
        precisions,
        weights,
        brevity_penalty,
        candidate_len: c,
        reference_len: r,
        score,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_ratios(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1 }
    }
}

pub fn rouge_n(candidate: &TokenSeq, reference: &TokenSeq, n: usize) -> Result<Prf, MetricError> {
    if reference.len() < n || n == 0 {
        return Err(MetricError::ReferenceTooShort { len: reference.len(), n });
    }
    let (overlap, cand_total, ref_total) = clipped_overlap(candidate.tokens(), reference.tokens(), n);
    let recall = overlap as f64 / ref_total as f64;
    let precision = if cand_total == 0 { 0.0 } else { overlap as f64 / cand_total as f64 };
    Ok(Prf::from_ratios(precision, recall))
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L with β = 1.
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> Result<Prf, MetricError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let l = lcs_len(candidate.tokens(), reference.tokens()) as f64;
    Ok(Prf::from_ratios(l / candidate.len() as f64, l / reference.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionTally {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionTally {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy, recall and F1 from a confusion tally, all as fractions.
///
/// With no positives anywhere (tp = fp = fn = 0) recall and F1 are 1.
/// With no actual positives but some false alarms, recall is reported as 0.
pub fn classification_scores(t: &ConfusionTally) -> Result<ClassificationScores, MetricError> {
    let total = t.total();
    if total == 0 {
        return Err(MetricError::EmptyTally);
    }
    let accuracy = (t.tp + t.tn) as f64 / total as f64;
    if t.tp == 0 && t.fp == 0 && t.fn_ == 0 {
        return Ok(ClassificationScores { accuracy, precision: 1.0, recall: 1.0, f1: 1.0 });
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(t.tp, t.tp + t.fp);
    let recall = ratio(t.tp, t.tp + t.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(ClassificationScores { accuracy, precision, recall, f1 })
}

/// Exact match rate as a percentage.
pub fn emr<T, F>(pred: &[T], gold: &[T], eq: F) -> Result<f64, MetricError>
where
    F: Fn(&T, &T) -> bool,
{
    if pred.len() != gold.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| eq(p, g)).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// String comparator for locations: trimmed, full-width digits folded.
pub fn text_exact_eq(a: &str, b: &str) -> bool {
    crate::schema::canonicalize_location(a) == crate::schema::canonicalize_location(b)
}

/// Canonical decimal form ("2", "2.0", "02" all become "2"), or None
/// when the text is not a decimal literal.
pub fn normalize_decimal(text: &str) -> Option<String> {
    crate::schema::Amount::parse_decimal(text).map(|(a, _)| a.to_decimal_string())
}

pub fn numeric_text_eq(a: &str, b: &str) -> bool {
    match (normalize_decimal(a), normalize_decimal(b)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    }
}

/// Sparse TF-IDF vector keyed by vocabulary index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TfIdfVector(pub BTreeMap<usize, f64>);

impl TfIdfVector {
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.values().map(|w| w * w).sum()
    }

    pub fn dot(&self, other: &TfIdfVector) -> f64 {
        self.0.iter().filter_map(|(k, w)| other.0.get(k).map(|v| w * v)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.values().all(|w| *w == 0.0)
    }
}

/// Vocabulary and smoothed idf built over one evaluation run.
#[derive(Debug, Clone)]
pub struct TfIdfModel {
    vocab: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

impl TfIdfModel {
    /// idf(t) = ln((1 + N) / (1 + df(t))) + 1 over the given documents.
    pub fn fit(docs: &[TokenSeq]) -> TfIdfModel {
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in docs {
            let uniq: BTreeSet<&str> = doc.tokens().iter().map(String::as_str).collect();
            for t in uniq {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = docs.len() as f64;
        let mut vocab = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (term, d)) in df.into_iter().enumerate() {
            vocab.insert(term.to_string(), i);
            idf.push(((1.0 + n) / (1.0 + d as f64)).ln() + 1.0);
        }
        TfIdfModel { vocab, idf }
    }

    pub fn dimension(&self) -> usize {
        self.vocab.len()
    }

    pub fn vectorize(&self, doc: &TokenSeq) -> TfIdfVector {
        let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
        for t in doc.tokens() {
            if let Some(&i) = self.vocab.get(t) {
                *tf.entry(i).or_insert(0.0) += 1.0;
            }
        }
        TfIdfVector(tf.into_iter().map(|(i, c)| (i, c * self.idf[i])).collect())
    }
}

/// Cosine of two vectors. Two zero vectors (two empty texts) count as
/// identical; a zero vector against a non-zero one scores 0.
pub fn cosine(a: &TfIdfVector, b: &TfIdfVector) -> f64 {
    match (a.is_zero(), b.is_zero()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        // sqrt(|a|^2 |b|^2) keeps identical vectors at exactly 1.
        _ => (a.dot(b) / (a.norm_sq() * b.norm_sq()).sqrt()).clamp(0.0, 1.0),
    }
}

/// Per-pair TF-IDF cosine with vocabulary and idf fitted on every text in the run.
pub fn tfidf_cosine(pred: &[String], gold: &[String], tokenizer: &dyn Tokenizer) -> Result<Vec<f64>, MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let pred_tok: Vec<TokenSeq> = pred.iter().map(|t| tokenizer.tokenize(t)).collect();
    let gold_tok: Vec<TokenSeq> = gold.iter().map(|t| tokenizer.tokenize(t)).collect();
    let all: Vec<TokenSeq> = pred_tok.iter().chain(&gold_tok).cloned().collect();
    let model = TfIdfModel::fit(&all);
    Ok(pred_tok
        .iter()
        .zip(&gold_tok)
        .map(|(p, g)| cosine(&model.vectorize(p), &model.vectorize(g)))
        .collect())
}

/// |A ∩ B| / |A ∪ B|, with J(∅, ∅) = 1.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Cohen's kappa between two annotators over the same items.
pub fn cohen_kappa<L: Eq + Hash + Ord>(a: &[L], b: &[L]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    // Integer form of (p_o - p_e) / (1 - p_e), scaled by n², so exact
    // rational inputs give correctly rounded results.
    let n = a.len() as u128;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as u128;
    let mut marg_a: BTreeMap<&L, u128> = BTreeMap::new();
    let mut marg_b: BTreeMap<&L, u128> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *marg_a.entry(x).or_insert(0) += 1;
        *marg_b.entry(y).or_insert(0) += 1;
    }
    let chance: u128 = marg_a
        .iter()
        .map(|(label, ca)| ca * marg_b.get(label).copied().unwrap_or(0))
        .sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Err(MetricError::DegenerateMarginals);
    }
    let numer = (n * agree) as f64 - chance as f64;
    Ok(numer / denom as f64)
}
