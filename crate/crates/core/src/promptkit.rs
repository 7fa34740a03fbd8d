//! Prompt templates, chat-format training samples, few-shot augmentation
//! and the fine-tuning manifest.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BriefingRecord;
use crate::schema::{canonical_json, GoldRecord, SchemaError, TypeCode};

/// The literal token replaced by the briefing body.
pub const PLACEHOLDER: &str = "{{briefing_text}}";

const SYSTEM_MARKER: &str = "=== system ===";
const USER_MARKER: &str = "=== user ===";

pub const ENGLISH_TEMPLATES: &str = include_str!("../templates/en.txt");
pub const CHINESE_TEMPLATES: &str = include_str!("../templates/zh.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("user template must contain exactly one {PLACEHOLDER} token, found {0}")]
    PlaceholderMissing(usize),
    #[error("template file is missing the {0:?} section marker")]
    MissingSection(&'static str),
    #[error("system template has no row for type code {0}")]
    MissingCodeRow(&'static str),
    #[error("record {record_id}: {source}")]
    InvalidRecord { record_id: String, source: SchemaError },
    #[error("briefing id {briefing:?} does not match gold id {gold:?}")]
    IdMismatch { briefing: String, gold: String },
    #[error("requested {requested} exemplars but only {available} available")]
    InsufficientExemplars { requested: usize, available: usize },
    #[error("effective batch {effective} != per-device batch {per_device} x accumulation {accum}")]
    InvariantViolation { per_device: u32, accum: u32, effective: u32 },
    #[error("briefing {0} was dropped by cleaning")]
    DroppedBriefing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub system_template: String,
    pub user_template: String,
}

impl PromptTemplates {
    pub fn new(system_template: String, user_template: String) -> Result<Self, PromptError> {
        let slots = user_template.matches(PLACEHOLDER).count();
        if slots != 1 {
            return Err(PromptError::PlaceholderMissing(slots));
        }
        for code in TypeCode::all() {
            if !system_template.contains(&format!("| {} |", code.as_str())) {
                return Err(PromptError::MissingCodeRow(code.as_str()));
            }
        }
        Ok(PromptTemplates { system_template, user_template })
    }

    /// Parses the two-section template file format:
    ///
    /// ```text
    /// === system ===
    /// ...
    /// === user ===
    /// ... {{briefing_text}} ...
    /// ```
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let text = text.replace("\r\n", "\n");
        let sys_at = text.find(SYSTEM_MARKER).ok_or(PromptError::MissingSection(SYSTEM_MARKER))?;
        let user_at = text.find(USER_MARKER).ok_or(PromptError::MissingSection(USER_MARKER))?;
        if user_at < sys_at {
            return Err(PromptError::MissingSection(SYSTEM_MARKER));
        }
        let section = |s: &str| s.trim_start_matches('\n').trim_end_matches('\n').to_string();
        let system = section(&text[sys_at + SYSTEM_MARKER.len()..user_at]);
        let user = section(&text[user_at + USER_MARKER.len()..]);
        PromptTemplates::new(system, user)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        PromptTemplates::parse(&std::fs::read_to_string(path)?)
    }

    pub fn english() -> Self {
        PromptTemplates::parse(ENGLISH_TEMPLATES).expect("bundled english template")
    }

    pub fn chinese() -> Self {
        PromptTemplates::parse(CHINESE_TEMPLATES).expect("bundled chinese template")
    }

    /// Substitutes the briefing body into the user template.
    pub fn render_user_text(&self, body: &str) -> Result<String, PromptError> {
        let slots = self.user_template.matches(PLACEHOLDER).count();
        if slots != 1 {
            return Err(PromptError::PlaceholderMissing(slots));
        }
        Ok(self.user_template.replacen(PLACEHOLDER, body, 1))
    }
}

pub fn render_user_prompt(templates: &PromptTemplates, briefing: &BriefingRecord) -> Result<String, PromptError> {
    if briefing.dropped {
        return Err(PromptError::DroppedBriefing(briefing.record_id.clone()));
    }
    templates.render_user_text(&briefing.text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "system" => Some(Role::System),
            "user" => Some(Role::User),
            "assistant" => Some(Role::Assistant),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage { role, content: content.into() }
    }
}

/// One system/user/assistant training instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSample {
    pub messages: Vec<ChatMessage>,
}

impl ChatSample {
    pub fn is_well_formed(&self) -> bool {
        let roles: Vec<Role> = self.messages.iter().map(|m| m.role).collect();
        roles == [Role::System, Role::User, Role::Assistant]
    }
}

pub fn synth_sample(
    templates: &PromptTemplates,
    briefing: &BriefingRecord,
    gold: &GoldRecord,
) -> Result<ChatSample, PromptError> {
    if briefing.record_id != gold.record_id {
        return Err(PromptError::IdMismatch { briefing: briefing.record_id.clone(), gold: gold.record_id.clone() });
    }
    let answer = canonical_json(&gold.record)
        .map_err(|source| PromptError::InvalidRecord { record_id: gold.record_id.clone(), source })?;
    Ok(ChatSample {
        messages: vec![
            ChatMessage::new(Role::System, templates.system_template.clone()),
            ChatMessage::new(Role::User, render_user_prompt(templates, briefing)?),
            ChatMessage::new(Role::Assistant, answer),
        ],
    })
}

/// Writes one `{"messages":[...]}` line per pair, in input order.
pub fn synth_dataset(
    templates: &PromptTemplates,
    pairs: &[(BriefingRecord, GoldRecord)],
    out: &Path,
) -> Result<usize, PromptError> {
    // Build everything first so a bad pair leaves no partial file behind.
    let mut lines = Vec::with_capacity(pairs.len());
    for (briefing, gold) in pairs {
        lines.push(serde_json::to_string(&synth_sample(templates, briefing, gold)?)?);
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    for line in &lines {
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(lines.len())
}

/// A worked input/output pair for few-shot prompting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub briefing_text: String,
    pub gold_json: String,
}

/// Prepends the first `k` exemplars as numbered input/output blocks; the
/// target prompt (and its briefing) stays last.
pub fn few_shot_augment(user_prompt: &str, exemplars: &[Exemplar], k: usize) -> Result<String, PromptError> {
    if k > exemplars.len() {
        return Err(PromptError::InsufficientExemplars { requested: k, available: exemplars.len() });
    }
    if k == 0 {
        return Ok(user_prompt.to_string());
    }
    let mut out = String::new();
    for (i, ex) in exemplars[..k].iter().enumerate() {
        out.push_str(&format!(
            "### Example {n}\n#### Input\n{input}\n#### Output\n```json\n{output}\n```\n\n",
            n = i + 1,
            input = ex.briefing_text,
            output = ex.gold_json,
        ));
    }
    out.push_str(user_prompt);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub max_seq_len: u32,
    pub epochs: u32,
    pub learning_rate: f64,
    pub scheduler: String,
    pub warmup_ratio: f64,
    pub per_device_batch: u32,
    pub grad_accum_steps: u32,
    pub effective_batch: u32,
    pub adaptation_method: String,
    pub base_model: String,
    pub folds: u32,
    pub seed: u64,
}

impl Default for TrainingManifest {
    fn default() -> Self {
        TrainingManifest {
            max_seq_len: 1024,
            epochs: 60,
            learning_rate: 2e-4,
            scheduler: "cosine".into(),
            warmup_ratio: 0.03,
            per_device_batch: 4,
            grad_accum_steps: 8,
            effective_batch: 32,
            adaptation_method: "lora".into(),
            base_model: "Qwen2.5-7B-Instruct".into(),
            folds: 5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifestOverrides {
    pub max_seq_len: Option<u32>,
    pub epochs: Option<u32>,
    pub learning_rate: Option<f64>,
    pub scheduler: Option<String>,
    pub warmup_ratio: Option<f64>,
    pub per_device_batch: Option<u32>,
    pub grad_accum_steps: Option<u32>,
    pub effective_batch: Option<u32>,
    pub base_model: Option<String>,
    pub folds: Option<u32>,
    pub seed: Option<u64>,
}

impl TrainingManifest {
    pub fn with_overrides(o: &ManifestOverrides) -> Result<Self, PromptError> {
        let d = TrainingManifest::default();
        let m = TrainingManifest {
            max_seq_len: o.max_seq_len.unwrap_or(d.max_seq_len),
            epochs: o.epochs.unwrap_or(d.epochs),
            learning_rate: o.learning_rate.unwrap_or(d.learning_rate),
            scheduler: o.scheduler.clone().unwrap_or(d.scheduler),
            warmup_ratio: o.warmup_ratio.unwrap_or(d.warmup_ratio),
            per_device_batch: o.per_device_batch.unwrap_or(d.per_device_batch),
            grad_accum_steps: o.grad_accum_steps.unwrap_or(d.grad_accum_steps),
            effective_batch: o.effective_batch.unwrap_or(d.effective_batch),
            adaptation_method: d.adaptation_method,
            base_model: o.base_model.clone().unwrap_or(d.base_model),
            folds: o.folds.unwrap_or(d.folds),
            seed: o.seed.unwrap_or(d.seed),
        };
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<(), PromptError> {
        if self.per_device_batch.checked_mul(self.grad_accum_steps) != Some(self.effective_batch) {
            return Err(PromptError::InvariantViolation {
                per_device: self.per_device_batch,
                accum: self.grad_accum_steps,
                effective: self.effective_batch,
            });
        }
        Ok(())
    }
}

/// Writes the manifest as a flat pretty-printed JSON document.
pub fn emit_training_manifest(overrides: &ManifestOverrides, out: &Path) -> Result<TrainingManifest, PromptError> {
    let manifest = TrainingManifest::with_overrides(overrides)?;
    std::fs::write(out, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DropReason;
    use crate::schema::ExtractionRecord;

    fn briefing(id: &str, text: &str) -> BriefingRecord {
        BriefingRecord {
            record_id: id.into(),
            text: text.into(),
            source_post_id: id.into(),
            cjk_count: 0,
            dropped: false,
            drop_reason: DropReason::None,
        }
    }

    #[test]
    fn bundled_templates_parse() {
        let en = PromptTemplates::english();
        assert!(en.system_template.starts_with("## Role Setting"));
        assert!(en.user_template.contains(PLACEHOLDER));
        PromptTemplates::chinese();
    }

    #[test]
    fn render_substitutes_only_the_slot() {
        let t = PromptTemplates::english();
        let out = render_user_prompt(&t, &briefing("a", "X")).unwrap();
        let (before, after) = t.user_template.split_once(PLACEHOLDER).unwrap();
        assert_eq!(out, format!("{before}X{after}"));
        let example = canonical_json(&ExtractionRecord::default()).unwrap();
        assert!(out.contains(&format!("### Output Format Example\n```json\n{example}\n```")));
    }

    #[test]
    fn placeholder_missing() {
        let t = PromptTemplates { system_template: String::new(), user_template: "no slot".into() };
        assert!(matches!(render_user_prompt(&t, &briefing("a", "X")), Err(PromptError::PlaceholderMissing(0))));
        let text = ENGLISH_TEMPLATES.replace(PLACEHOLDER, "");
        assert!(matches!(PromptTemplates::parse(&text), Err(PromptError::PlaceholderMissing(0))));
        let text = ENGLISH_TEMPLATES.replace("| 07 |", "| 7 |");
        assert!(matches!(PromptTemplates::parse(&text), Err(PromptError::MissingCodeRow("07"))));
    }

    #[test]
    fn sample_shape() {
        let t = PromptTemplates::english();
        let gold = GoldRecord { record_id: "a".into(), record: ExtractionRecord::default() };
        let s = synth_sample(&t, &briefing("a", "正文"), &gold).unwrap();
        assert!(s.is_well_formed());
        assert_eq!(s.messages[2].content, canonical_json(&ExtractionRecord::default()).unwrap());
        assert_eq!(synth_sample(&t, &briefing("a", "正文"), &gold).unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.starts_with(r#"{"messages":[{"role":"system","content":"#));
    }

    #[test]
    fn sample_rejects_invalid_gold_and_mismatch() {
        let t = PromptTemplates::english();
        let mut record = ExtractionRecord::default();
        record.event.type_codes = vec!["12".into()];
        let gold = GoldRecord { record_id: "a".into(), record };
        assert!(matches!(synth_sample(&t, &briefing("a", "x"), &gold), Err(PromptError::InvalidRecord { .. })));
        let gold = GoldRecord { record_id: "b".into(), record: ExtractionRecord::default() };
        match synth_sample(&t, &briefing("a", "x"), &gold) {
            Err(PromptError::IdMismatch { briefing, gold }) => assert_eq!((briefing.as_str(), gold.as_str()), ("a", "b")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn few_shot() {
        let ex = vec![
            Exemplar { briefing_text: "例一".into(), gold_json: "{}".into() },
            Exemplar { briefing_text: "例二".into(), gold_json: "{}".into() },
        ];
        assert_eq!(few_shot_augment("TARGET", &ex, 0).unwrap(), "TARGET");
        let out = few_shot_augment("TARGET", &ex, 2).unwrap();
        let (a, b, t) = (out.find("例一").unwrap(), out.find("例二").unwrap(), out.find("TARGET").unwrap());
        assert!(a < b && b < t);
        assert!(out.ends_with("TARGET"));
        assert!(matches!(few_shot_augment("T", &ex, 3), Err(PromptError::InsufficientExemplars { requested: 3, available: 2 })));
    }

    #[test]
    fn manifest_defaults_and_overrides() {
        let m = TrainingManifest::with_overrides(&ManifestOverrides::default()).unwrap();
        assert_eq!((m.max_seq_len, m.epochs, m.per_device_batch, m.grad_accum_steps, m.effective_batch, m.folds), (1024, 60, 4, 8, 32, 5));
        assert_eq!(m.learning_rate, 2e-4);
        let o = ManifestOverrides { per_device_batch: Some(8), grad_accum_steps: Some(4), ..Default::default() };
        assert_eq!(TrainingManifest::with_overrides(&o).unwrap().effective_batch, 32);
        let o = ManifestOverrides { effective_batch: Some(64), ..Default::default() };
        assert!(matches!(TrainingManifest::with_overrides(&o), Err(PromptError::InvariantViolation { .. })));
    }
}
