//! Recovering an extraction record from raw model output.
//!
//! The pipeline is: locate the JSON blob (fenced block or first balanced
//! object), optionally repair common syntax slips, parse, then walk the
//! object through a key alias table onto the fifteen leaf fields.
//! Missing leaves stay absent; scoring them is the evaluator's concern.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::schema::{
    canonicalize_location, strict_leaf, validate_leaves, Amount, ExtractionRecord, FieldKind, FieldPath,
    FieldValue, ValidationReport, Violation, ViolationKind,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in output")]
    NoJsonFound,
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairKind {
    FullwidthPunct,
    SingleQuotes,
    TrailingComma,
    LiteralCase,
}

/// Returns the interior of the first ```json fence, or else the first
/// balanced `{...}` span (braces inside string literals ignored).
pub fn extract_json_blob(raw: &str) -> Result<String, ParseError> {
    let lower = raw.to_ascii_lowercase();
    if let Some(start) = lower.find("```json") {
        let body = &raw[start + "```json".len()..];
        if let Some(end) = body.find("```") {
            return Ok(body[..end].trim().to_string());
        }
        // Unterminated fence: fall through to brace scanning of the tail.
        if let Some(span) = first_balanced_object(body) {
            return Ok(span.to_string());
        }
    }
    first_balanced_object(raw).map(str::to_string).ok_or(ParseError::NoJsonFound)
}

fn first_balanced_object(s: &str) -> Option<&str> {
    let starts = s.char_indices().filter(|(_, c)| *c == '{').map(|(i, _)| i);
    for start in starts {
        if let Some(end) = balanced_end(&s[start..]) {
            return Some(&s[start..start + end]);
        }
    }
    None
}

/// Byte length of the balanced object starting at `s[0] == '{'`.
fn balanced_end(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q || (q == '“' && c == '”') {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '“' => quote = Some(c),
            '{' | '｛' => depth += 1,
            '}' | '｝' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + c.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}

fn fullwidth_structural(c: char) -> Option<char> {
    Some(match c {
        '，' => ',',
        '：' => ':',
        '｛' => '{',
        '｝' => '}',
        '［' => '[',
        '］' => ']',
        _ => return None,
    })
}

fn push_escaped_dq(out: &mut String, c: char) {
    if c == '"' {
        out.push_str("\\\"");
    } else {
        out.push(c);
    }
}

/// Copies a straight-quoted string literal verbatim starting at `chars[i]`
/// (the opening quote). Returns the index past the closing quote.
fn copy_literal(chars: &[char], mut i: usize, quote: char, out: &mut String) -> usize {
    out.push(chars[i]);
    i += 1;
    while i < chars.len() {
        let c = chars[i];
        out.push(c);
        i += 1;
        if c == '\\' && i < chars.len() {
            out.push(chars[i]);
            i += 1;
        } else if c == quote {
            break;
        }
    }
    i
}

/// Full-width structural punctuation and curly-quoted strings outside of
/// string literals become their ASCII equivalents.
fn repair_fullwidth(src: &str) -> (String, bool) {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len());
    let mut changed = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '"' | '\'' => i = copy_literal(&chars, i, c, &mut out),
            '“' | '‘' => {
                let close = if c == '“' { '”' } else { '’' };
                changed = true;
                out.push('"');
                i += 1;
                while i < chars.len() && chars[i] != close && chars[i] != c {
                    push_escaped_dq(&mut out, chars[i]);
                    i += 1;
                }
                out.push('"');
                i += 1;
            }
            _ => {
                match fullwidth_structural(c) {
                    Some(a) => {
                        out.push(a);
                        changed = true;
                    }
                    None => out.push(c),
                }
                i += 1;
            }
        }
    }
    (out, changed)
}

/// Single-quoted strings become double-quoted.
fn repair_single_quotes(src: &str) -> (String, bool) {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len());
    let mut changed = false;
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '"' => i = copy_literal(&chars, i, '"', &mut out),
            '\'' => {
                changed = true;
                out.push('"');
                i += 1;
                while i < chars.len() && chars[i] != '\'' {
                    match chars[i] {
                        '\\' if chars.get(i + 1) == Some(&'\'') => {
                            out.push('\'');
                            i += 2;
                        }
                        '\\' => {
                            out.push('\\');
                            if let Some(n) = chars.get(i + 1) {
                                out.push(*n);
                            }
                            i += 2;
                        }
                        c => {
                            push_escaped_dq(&mut out, c);
                            i += 1;
                        }
                    }
                }
                out.push('"');
                i += 1;
            }
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    (out, changed)
}

fn repair_trailing_commas(src: &str) -> (String, bool) {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len());
    let mut changed = false;
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '"' => i = copy_literal(&chars, i, '"', &mut out),
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if matches!(next, Some('}') | Some(']')) {
                    changed = true;
                } else {
                    out.push(',');
                }
                i += 1;
            }
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    (out, changed)
}

fn repair_literal_case(src: &str) -> (String, bool) {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len());
    let mut changed = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '"' {
            i = copy_literal(&chars, i, '"', &mut out);
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let fixed = match word.to_ascii_lowercase().as_str() {
                "true" => "true",
                "false" => "false",
                "null" | "none" => "null",
                _ => word.as_str(),
            };
            if fixed != word {
                changed = true;
            }
            out.push_str(fixed);
        } else {
            out.push(c);
            i += 1;
        }
    }
    (out, changed)
}

/// Applies the syntax repairs in fixed order and lists the ones that fired.
pub fn repair_json(blob: &str) -> (String, Vec<RepairKind>) {
    let passes: [(RepairKind, fn(&str) -> (String, bool)); 4] = [
        (RepairKind::FullwidthPunct, repair_fullwidth),
        (RepairKind::SingleQuotes, repair_single_quotes),
        (RepairKind::TrailingComma, repair_trailing_commas),
        (RepairKind::LiteralCase, repair_literal_case),
    ];
    let mut text = blob.to_string();
    let mut applied = Vec::new();
    for (kind, pass) in passes {
        let (next, changed) = pass(&text);
        if changed {
            applied.push(kind);
            text = next;
        }
    }
    (text, applied)
}

/// Canonical key segments of the record.
const SEGMENTS: [&str; 18] = [
    "Location",
    "Province",
    "City",
    "Event Characteristics",
    "Type Code",
    "Illegal Means",
    "Cybercrime",
    "Completed Illegal Act",
    "Case Closure",
    "Police Handling",
    "Impact Assessment",
    "Deaths",
    "Injuries",
    "Economic Losses",
    "Social Impact",
    "Existence",
    "Number",
    "Amount",
];

const CHINESE_ALIASES: [(&str, &str); 26] = [
    ("位置信息", "Location"),
    ("地点信息", "Location"),
    ("省份", "Province"),
    ("省", "Province"),
    ("城市", "City"),
    ("市", "City"),
    ("事件特征", "Event Characteristics"),
    ("案件类型", "Type Code"),
    ("类型代码", "Type Code"),
    ("违法手段", "Illegal Means"),
    ("作案手段", "Illegal Means"),
    ("是否网络犯罪", "Cybercrime"),
    ("网络犯罪", "Cybercrime"),
    ("是否完成违法行为", "Completed Illegal Act"),
    ("是否结案", "Case Closure"),
    ("警方处置", "Police Handling"),
    ("影响评估", "Impact Assessment"),
    ("死亡", "Deaths"),
    ("死亡情况", "Deaths"),
    ("受伤", "Injuries"),
    ("受伤情况", "Injuries"),
    ("经济损失", "Economic Losses"),
    ("社会影响", "Social Impact"),
    ("是否存在", "Existence"),
    ("数量", "Number"),
    ("金额", "Amount"),
];

/// Accepted key spellings mapped onto canonical key segments.
#[derive(Debug, Clone)]
pub struct KeyAliasMap {
    exact: HashMap<String, &'static str>,
    loose: HashMap<String, &'static str>,
}

fn loosen(key: &str) -> String {
    key.chars()
        .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
        .flat_map(char::to_lowercase)
        .collect()
}

impl Default for KeyAliasMap {
    fn default() -> Self {
        let mut map = KeyAliasMap::english();
        for (alias, canonical) in CHINESE_ALIASES {
            map.add(alias, canonical).expect("built-in alias");
        }
        map
    }
}

impl KeyAliasMap {
    /// Only the canonical English keys.
    pub fn english() -> Self {
        let mut map = KeyAliasMap { exact: HashMap::new(), loose: HashMap::new() };
        for seg in SEGMENTS {
            map.exact.insert(seg.to_string(), seg);
            map.loose.insert(loosen(seg), seg);
        }
        map
    }

    /// Registers `alias` for a canonical key segment. An alias already bound
    /// to a different segment is rejected.
    pub fn add(&mut self, alias: &str, canonical: &str) -> Result<(), String> {
        let seg = SEGMENTS
            .iter()
            .copied()
            .find(|s| *s == canonical)
            .ok_or_else(|| format!("{canonical:?} is not a record key"))?;
        if let Some(prev) = self.exact.get(alias) {
            if *prev != seg {
                return Err(format!("alias {alias:?} already maps to {prev:?}"));
            }
        }
        self.exact.insert(alias.to_string(), seg);
        self.loose.entry(loosen(alias)).or_insert(seg);
        Ok(())
    }

    pub fn resolve(&self, key: &str, mode: ParseMode) -> Option<&'static str> {
        match mode {
            ParseMode::Strict => self.exact.get(key).copied(),
            ParseMode::Lenient => self.exact.get(key).or_else(|| self.loose.get(&loosen(key))).copied(),
        }
    }
}

/// Each of the fifteen leaves individually present or absent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartialRecord {
    values: BTreeMap<FieldPath, FieldValue>,
}

impl PartialRecord {
    pub fn get(&self, field: FieldPath) -> Option<&FieldValue> {
        self.values.get(&field)
    }

    pub fn set(&mut self, field: FieldPath, value: FieldValue) {
        self.values.insert(field, value);
    }

    pub fn remove(&mut self, field: FieldPath) -> Option<FieldValue> {
        self.values.remove(&field)
    }

    pub fn present(&self) -> BTreeSet<FieldPath> {
        self.values.keys().copied().collect()
    }

    pub fn from_record(record: &ExtractionRecord) -> Self {
        PartialRecord { values: FieldPath::ALL.iter().map(|f| (*f, record.get(*f))).collect() }
    }

    /// The full record, if every leaf is present.
    pub fn complete(&self) -> Option<ExtractionRecord> {
        let mut record = ExtractionRecord::default();
        for f in FieldPath::ALL {
            record.set(f, self.values.get(&f)?.clone());
        }
        Some(record)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_leaves(|f| self.values.get(&f).cloned())
    }

    /// Flat JSON object keyed by field path.
    pub fn to_json(&self) -> Value {
        Value::Object(self.values.iter().map(|(f, v)| (f.as_str().to_string(), v.to_json())).collect())
    }

    pub fn from_json(value: &Value) -> Option<PartialRecord> {
        let obj = value.as_object()?;
        let mut out = PartialRecord::default();
        for (k, v) in obj {
            let field = FieldPath::parse(k)?;
            out.set(field, strict_leaf(field, v)?);
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedExtraction {
    pub record: PartialRecord,
    pub present_fields: BTreeSet<FieldPath>,
    pub repairs: Vec<RepairKind>,
    pub report: ValidationReport,
}

impl ParsedExtraction {
    /// The result for output that yielded nothing.
    pub fn empty() -> Self {
        ParsedExtraction {
            record: PartialRecord::default(),
            present_fields: BTreeSet::new(),
            repairs: Vec::new(),
            report: ValidationReport::new(),
        }
    }

    pub fn absent_fields(&self) -> Vec<FieldPath> {
        FieldPath::ALL.into_iter().filter(|f| !self.present_fields.contains(f)).collect()
    }

    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "record": self.record.to_json(),
            "present_fields": self.present_fields.iter().map(|f| f.as_str()).collect::<Vec<_>>(),
            "repairs": self.repairs,
            "report": self.report,
        })
    }

    pub fn from_json(value: &Value) -> Option<ParsedExtraction> {
        let record = PartialRecord::from_json(value.get("record")?)?;
        let present_fields = record.present();
        let repairs = serde_json::from_value(value.get("repairs").cloned().unwrap_or(Value::Array(vec![]))).ok()?;
        let report = match value.get("report") {
            Some(r) => serde_json::from_value(r.clone()).ok()?,
            None => record.validate(),
        };
        Some(ParsedExtraction { record, present_fields, repairs, report })
    }
}

struct Walker<'a> {
    aliases: &'a KeyAliasMap,
    mode: ParseMode,
    report: ValidationReport,
    record: PartialRecord,
}

impl<'a> Walker<'a> {
    fn warn(&mut self, field: &str, kind: ViolationKind, msg: impl Into<String>) {
        self.report.warning(Violation::new(field, kind, msg));
    }

    fn violate(&mut self, field: &str, kind: ViolationKind, msg: impl Into<String>) {
        self.report.violation(Violation::new(field, kind, msg));
    }

    /// Children of `obj` keyed by canonical segment. Unknown keys are noted.
    fn children<'v>(&mut self, obj: &'v Map<String, Value>, at: &str) -> HashMap<&'static str, &'v Value> {
        let mut out = HashMap::new();
        for (k, v) in obj {
            match self.aliases.resolve(k, self.mode) {
                Some(seg) if !out.contains_key(seg) => {
                    out.insert(seg, v);
                }
                Some(seg) => self.warn(at, ViolationKind::UnknownKey, format!("duplicate key {k:?} for {seg:?} ignored")),
                None => self.warn(at, ViolationKind::UnknownKey, format!("unknown key {k:?}")),
            }
        }
        out
    }

    fn walk(&mut self, root: &Value) -> Result<(), ParseError> {
        let obj = root.as_object().ok_or_else(|| ParseError::SchemaViolation("top level is not an object".into()))?;
        let top = self.children(obj, "$");
        for field in FieldPath::ALL {
            let keys = field.json_keys();
            let mut node: Option<&Value> = top.get(keys[0]).copied();
            // Unknown-key warnings for nested objects are collected once, below.
            for key in &keys[1..] {
                node = node
                    .and_then(Value::as_object)
                    .and_then(|o| resolve_quiet(self.aliases, self.mode, o).get(key).copied());
            }
            match node {
                Some(v) => self.leaf(field, v),
                None => self.warn(field.as_str(), ViolationKind::MissingField, "field not present in output"),
            }
        }
        self.unknown_nested_keys(&top);
        Ok(())
    }

    fn unknown_nested_keys(&mut self, top: &HashMap<&'static str, &Value>) {
        for group in ["Location", "Event Characteristics", "Impact Assessment"] {
            if let Some(Value::Object(o)) = top.get(group) {
                let kids = self.children(o, group);
                if group == "Impact Assessment" {
                    for claim in ["Deaths", "Injuries", "Economic Losses"] {
                        if let Some(Value::Object(c)) = kids.get(claim) {
                            self.children(c, claim);
                        }
                    }
                }
            }
        }
    }

    fn leaf(&mut self, field: FieldPath, v: &Value) {
        let path = field.as_str();
        if let Some(value) = strict_leaf(field, v) {
            if let (FieldKind::Amount, Value::Number(n)) = (field.kind(), v) {
                if let Some((_, true)) = Amount::parse_decimal(&n.to_string()) {
                    self.warn(path, ViolationKind::PrecisionLoss, format!("{n} rounded to fen"));
                }
            }
            let value = match value {
                FieldValue::Text(s) if field.kind() == FieldKind::Location && self.mode == ParseMode::Lenient => {
                    FieldValue::Text(canonicalize_location(&s))
                }
                other => other,
            };
            self.record.set(field, value);
            return;
        }
        if self.mode == ParseMode::Lenient {
            if let Some(value) = coerce(field, v) {
                self.warn(path, ViolationKind::CoercedValue, format!("coerced {v} to the field type"));
                self.record.set(field, value);
                return;
            }
        }
        self.violate(path, ViolationKind::TypeMismatch, format!("unexpected value {v}"));
    }
}

fn resolve_quiet<'v>(aliases: &KeyAliasMap, mode: ParseMode, obj: &'v Map<String, Value>) -> HashMap<&'static str, &'v Value> {
    let mut out = HashMap::new();
    for (k, v) in obj {
        if let Some(seg) = aliases.resolve(k, mode) {
            out.entry(seg).or_insert(v);
        }
    }
    out
}

/// Lenient conversions for values models commonly mistype.
fn coerce(field: FieldPath, v: &Value) -> Option<FieldValue> {
    match (field.kind(), v) {
        (FieldKind::Count, Value::String(s)) => {
            let (a, lossy) = Amount::parse_decimal(s)?;
            (!lossy && a.fen() % 100 == 0).then(|| FieldValue::Count(a.fen() / 100))
        }
        (FieldKind::Count, Value::Number(n)) => {
            let (a, _) = Amount::parse_decimal(&n.to_string())?;
            (a.fen() % 100 == 0).then(|| FieldValue::Count(a.fen() / 100))
        }
        (FieldKind::Amount, Value::String(s)) => Amount::parse_decimal(s).map(|(a, _)| FieldValue::Amount(a)),
        (FieldKind::Bool, Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "是" => Some(FieldValue::Bool(true)),
            "false" | "否" => Some(FieldValue::Bool(false)),
            _ => None,
        },
        (FieldKind::Codes, Value::Array(items)) => items
            .iter()
            .map(|item| match item {
                Value::Number(n) => n.as_u64().map(|n| format!("{n:02}")),
                Value::String(s) => Some(pad_code(s)),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(FieldValue::Codes),
        (FieldKind::Codes, Value::String(s)) => Some(FieldValue::Codes(
            s.split([',', '，', '、', ' '])
                .filter(|p| !p.trim().is_empty())
                .map(pad_code)
                .collect(),
        )),
        (FieldKind::Location | FieldKind::Text, Value::Null) => Some(FieldValue::Text(String::new())),
        _ => None,
    }
}

fn pad_code(s: &str) -> String {
    let t = s.trim();
    if t.len() == 1 && t.chars().all(|c| c.is_ascii_digit()) {
        format!("0{t}")
    } else {
        t.to_string()
    }
}

/// Parses raw model output into a (possibly partial) record.
///
/// Strict mode accepts only a blob that parses as-is with every leaf present
/// and no codebook violation. Lenient mode repairs syntax, coerces common
/// type slips, and returns whatever leaves it could recover.
pub fn parse_output(raw: &str, aliases: &KeyAliasMap, mode: ParseMode) -> Result<ParsedExtraction, ParseError> {
    let blob = extract_json_blob(raw)?;
    let (text, repairs) = match mode {
        ParseMode::Strict => (blob, Vec::new()),
        ParseMode::Lenient => repair_json(&blob),
    };
    let value: Value = serde_json::from_str(&text).map_err(|e| ParseError::MalformedJson(e.to_string()))?;
    let mut walker = Walker { aliases, mode, report: ValidationReport::new(), record: PartialRecord::default() };
    walker.walk(&value)?;
    let mut report = walker.report;
    report.merge(walker.record.validate());
    if mode == ParseMode::Strict {
        let blocking: Vec<String> = report
            .violations
            .iter()
            .chain(report.warnings.iter().filter(|w| matches!(w.kind, ViolationKind::MissingField | ViolationKind::UnknownKey)))
            .map(|v| format!("{}: {}", v.field, v.message))
            .collect();
        if !blocking.is_empty() {
            return Err(ParseError::SchemaViolation(blocking.join("; ")));
        }
    }
    let present_fields = walker.record.present();
    Ok(ParsedExtraction { record: walker.record, present_fields, repairs, report })
}

/// Lenient parse that maps any failure onto an all-absent extraction.
pub fn parse_or_empty(raw: &str, aliases: &KeyAliasMap) -> ParsedExtraction {
    parse_output(raw, aliases, ParseMode::Lenient).unwrap_or_else(|e| {
        log::debug!("unparseable output: {e}");
        ParsedExtraction::empty()
    })
}
