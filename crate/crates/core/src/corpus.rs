//! CSV ingestion and the cleaning pipeline that turns raw posts into
//! briefing records.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum ideograph count for a post to be kept.
pub const DEFAULT_MIN_LENGTH: usize = 15;

/// ASCII punctuation that survives normalization.
pub const ASCII_PUNCTUATION: &str = ".,:;!?()\"-";

/// Full-width and CJK punctuation that survives normalization.
pub const CJK_PUNCTUATION: &str = "。，、；：？！“”‘’（）《》〈〉【】「」『』〔〕—…·～－．";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("missing column {0:?} in csv header")]
    MissingColumn(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPost {
    pub post_id: String,
    pub account_id: String,
    pub posted_at: String,
    pub reposts: u64,
    pub likes: u64,
    pub comments: u64,
    pub body_text: String,
    pub image_texts: Vec<String>,
}

impl RawPost {
    /// Body text followed by each OCR text, newline separated.
    pub fn full_text(&self) -> String {
        let mut out = self.body_text.clone();
        for t in &self.image_texts {
            out.push('\n');
            out.push_str(t);
        }
        out
    }
}

/// Header names for each RawPost field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub post_id: String,
    pub account_id: String,
    pub posted_at: String,
    pub reposts: String,
    pub likes: String,
    pub comments: String,
    pub body_text: String,
    /// Optional; a cell may hold several OCR texts split by `image_separator`.
    pub image_texts: Option<String>,
    pub image_separator: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            post_id: "post_id".into(),
            account_id: "account_id".into(),
            posted_at: "posted_at".into(),
            reposts: "reposts".into(),
            likes: "likes".into(),
            comments: "comments".into(),
            body_text: "body_text".into(),
            image_texts: Some("image_texts".into()),
            image_separator: "||".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestMode {
    Strict,
    #[default]
    Lenient,
}

/// A row that was skipped in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MalformedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub posts: Vec<RawPost>,
    pub malformed: Vec<MalformedRow>,
}

pub fn ingest_csv(path: &Path, columns: &ColumnMap, mode: IngestMode) -> Result<Ingested, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    ingest_reader(file, columns, mode)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, columns: &ColumnMap, mode: IngestMode) -> Result<Ingested, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let index_of = |name: &str| -> Result<usize, CorpusError> {
        header
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}').trim() == name)
            .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))
    };
    let idx = [
        index_of(&columns.post_id)?,
        index_of(&columns.account_id)?,
        index_of(&columns.posted_at)?,
        index_of(&columns.reposts)?,
        index_of(&columns.likes)?,
        index_of(&columns.comments)?,
        index_of(&columns.body_text)?,
    ];
    let image_idx = columns.image_texts.as_deref().map(index_of).transpose()?;

    let mut out = Ingested::default();
    let mut seen_ids = HashSet::new();
    for result in rdr.records() {
        let row = match result {
            Ok(row) => row,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                let bad = MalformedRow { line, reason: e.to_string() };
                match mode {
                    IngestMode::Strict => return Err(CorpusError::MalformedRow { line: bad.line, reason: bad.reason }),
                    IngestMode::Lenient => {
                        out.malformed.push(bad);
                        continue;
                    }
                }
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&row, &idx, image_idx, &columns.image_separator) {
            Ok(post) if !seen_ids.insert(post.post_id.clone()) => {
                let reason = format!("duplicate post_id {:?}", post.post_id);
                match mode {
                    IngestMode::Strict => return Err(CorpusError::MalformedRow { line, reason }),
                    IngestMode::Lenient => out.malformed.push(MalformedRow { line, reason }),
                }
            }
            Ok(post) => out.posts.push(post),
            Err(reason) => match mode {
                IngestMode::Strict => return Err(CorpusError::MalformedRow { line, reason }),
                IngestMode::Lenient => {
                    log::warn!("skipping csv line {line}: {reason}");
                    out.malformed.push(MalformedRow { line, reason });
                }
            },
        }
    }
    Ok(out)
}

fn parse_row(row: &csv::StringRecord, idx: &[usize; 7], image_idx: Option<usize>, sep: &str) -> Result<RawPost, String> {
    let cell = |i: usize| row.get(i).ok_or_else(|| format!("row has {} cells, expected column {}", row.len(), i + 1));
    let count = |i: usize, name: &str| -> Result<u64, String> {
        let raw = cell(i)?.trim();
        if raw.is_empty() {
            return Ok(0);
        }
        raw.parse::<u64>().map_err(|_| format!("{name} is not a non-negative integer: {raw:?}"))
    };
    let post_id = cell(idx[0])?.trim().to_string();
    if post_id.is_empty() {
        return Err("empty post_id".into());
    }
    let image_texts = match image_idx {
        Some(i) => row
            .get(i)
            .unwrap_or("")
            .split(sep)
            .filter(|t| !t.trim().is_empty())
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    Ok(RawPost {
        post_id,
        account_id: cell(idx[1])?.to_string(),
        posted_at: cell(idx[2])?.to_string(),
        reposts: count(idx[3], "reposts")?,
        likes: count(idx[4], "likes")?,
        comments: count(idx[5], "comments")?,
        body_text: cell(idx[6])?.to_string(),
        image_texts,
    })
}

static URL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:https?://|www\.)[!-~]*|(?:t|dwz|url|sina|weibo)\.cn/[!-~]*").expect("url pattern")
});

static MENTION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"@+[^\s\p{P}\p{S}]+\s*").expect("mention pattern"));

static WS_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+").expect("whitespace pattern"));

pub fn is_cjk_ideograph(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x323AF)
}

fn is_allowed(c: char) -> bool {
    is_cjk_ideograph(c)
        || c.is_ascii_digit()
        || ('０'..='９').contains(&c)
        || c.is_whitespace()
        || ASCII_PUNCTUATION.contains(c)
        || CJK_PUNCTUATION.contains(c)
}

/// Removes URLs, then every character outside the allowed classes, then
/// collapses whitespace runs and trims.
pub fn normalize_text(text: &str) -> String {
    let without_urls = URL_RE.replace_all(text, "");
    let filtered: String = without_urls.chars().filter(|c| is_allowed(*c)).collect();
    WS_RE.replace_all(&filtered, " ").trim().to_string()
}

/// Deletes `@name` mention tokens together with the whitespace after them.
pub fn strip_mentions(text: &str) -> String {
    MENTION_RE.replace_all(text, "").into_owned()
}

pub fn count_cjk(text: &str) -> usize {
    text.chars().filter(|c| is_cjk_ideograph(*c)).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    #[default]
    None,
    TooShort,
    ExactDuplicate,
    MentionDuplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BriefingRecord {
    pub record_id: String,
    pub text: String,
    pub source_post_id: String,
    pub cjk_count: usize,
    pub dropped: bool,
    pub drop_reason: DropReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CleaningStats {
    pub input_count: usize,
    pub url_stripped_count: usize,
    pub short_dropped_count: usize,
    pub duplicate_dropped_count: usize,
    pub output_count: usize,
    /// Posts withheld before the pipeline by an exclusion list.
    pub excluded_count: usize,
}

impl CleaningStats {
    pub fn is_conserved(&self) -> bool {
        self.output_count + self.short_dropped_count + self.duplicate_dropped_count == self.input_count
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub min_length: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig { min_length: DEFAULT_MIN_LENGTH }
    }
}

/// Mention stripping, normalization, length filter, then exact-match dedup.
/// Every input post yields one record; dropped ones carry a reason.
pub fn clean_pipeline(posts: &[RawPost], config: &CleanConfig) -> (Vec<BriefingRecord>, CleaningStats) {
    let mut stats = CleaningStats { input_count: posts.len(), ..Default::default() };
    // kept text -> normalized form of its first occurrence before mention stripping
    let mut first_seen: HashMap<String, String> = HashMap::new();
    let mut records = Vec::with_capacity(posts.len());

    for post in posts {
        let full = post.full_text();
        if URL_RE.is_match(&full) {
            stats.url_stripped_count += 1;
        }
        let text = normalize_text(&strip_mentions(&full));
        let with_mentions = normalize_text(&full);
        let cjk_count = count_cjk(&text);

        let drop_reason = if cjk_count < config.min_length {
            stats.short_dropped_count += 1;
            DropReason::TooShort
        } else if let Some(prior) = first_seen.get(&text) {
            stats.duplicate_dropped_count += 1;
            if *prior == with_mentions {
                DropReason::ExactDuplicate
            } else {
                DropReason::MentionDuplicate
            }
        } else {
            first_seen.insert(text.clone(), with_mentions);
            DropReason::None
        };

        records.push(BriefingRecord {
            record_id: post.post_id.clone(),
            text,
            source_post_id: post.post_id.clone(),
            cjk_count,
            dropped: drop_reason != DropReason::None,
            drop_reason,
        });
    }
    stats.output_count = records.iter().filter(|r| !r.dropped).count();
    (records, stats)
}
