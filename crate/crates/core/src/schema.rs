//! The fifteen-field extraction record, the case-type code table, validation
//! and canonical serialization.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// The eleven case-type codes and their labels.
pub const TYPE_CODE_TABLE: [(&str, &str); 11] = [
    ("01", "Endangering national security"),
    ("02", "Endangering public safety"),
    ("03", "Economic and financial crimes"),
    ("04", "Infringement of personal rights"),
    ("05", "Infringement of property"),
    ("06", "Obstructing social management"),
    ("07", "Endangering national defense interests"),
    ("08", "Bribery and corruption"),
    ("09", "Dereliction of duty"),
    ("10", "Crimes committed by military personnel"),
    ("11", "Suicide"),
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("unknown type code {0:?}")]
    UnknownTypeCode(String),
    #[error("record is invalid: {0}")]
    InvalidRecord(String),
    #[error("malformed record json: {0}")]
    Malformed(String),
}

/// A validated two-digit case-type code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypeCode(u8);

impl TypeCode {
    pub fn parse(code: &str) -> Result<Self, SchemaError> {
        TYPE_CODE_TABLE
            .iter()
            .position(|(c, _)| *c == code)
            .map(|i| TypeCode(i as u8 + 1))
            .ok_or_else(|| SchemaError::UnknownTypeCode(code.to_string()))
    }

    pub fn as_str(self) -> &'static str {
        TYPE_CODE_TABLE[self.0 as usize - 1].0
    }

    pub fn label(self) -> &'static str {
        TYPE_CODE_TABLE[self.0 as usize - 1].1
    }

    pub fn all() -> impl Iterator<Item = TypeCode> {
        (1..=11u8).map(TypeCode)
    }
}

impl fmt::Display for TypeCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Label lookup over the fixed code table.
pub fn code_label(code: &str) -> Result<&'static str, SchemaError> {
    TypeCode::parse(code).map(TypeCode::label)
}

/// A non-negative amount of yuan held as an integer number of fen (cents),
/// so two fractional digits are carried exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Amount(i64);

impl Amount {
    pub const ZERO: Amount = Amount(0);

    pub fn from_fen(fen: i64) -> Self {
        Amount(fen)
    }

    pub fn from_yuan(yuan: i64) -> Self {
        Amount(yuan * 100)
    }

    pub fn fen(self) -> i64 {
        self.0
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    /// Parses a decimal literal ("12", "12.5", "1.2e3", "-3").
    /// Returns the amount and whether precision beyond two fractional
    /// digits had to be rounded away.
    pub fn parse_decimal(text: &str) -> Option<(Amount, bool)> {
        let text = text.trim();
        if text.is_empty() {
            return None;
        }
        if text.contains(['e', 'E']) {
            let v: f64 = text.parse().ok()?;
            if !v.is_finite() {
                return None;
            }
            let fen = (v * 100.0).round();
            let lossy = (v * 100.0 - fen).abs() > 1e-6;
            return Some((Amount(fen as i64), lossy));
        }
        let (neg, body) = match text.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, text.strip_prefix('+').unwrap_or(text)),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        let whole: i64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
        let mut digits = frac_part.chars().map(|c| c as i64 - '0' as i64);
        let d1 = digits.next().unwrap_or(0);
        let d2 = digits.next().unwrap_or(0);
        let rest: Vec<i64> = digits.collect();
        let lossy = rest.iter().any(|d| *d != 0);
        let mut fen = whole.checked_mul(100)?.checked_add(d1 * 10 + d2)?;
        if rest.first().copied().unwrap_or(0) >= 5 {
            fen += 1;
        }
        Some((Amount(if neg { -fen } else { fen }), lossy))
    }

    /// Shortest decimal rendering: integers print without a fraction.
    pub fn to_decimal_string(self) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let (whole, frac) = (abs / 100, abs % 100);
        match frac {
            0 => format!("{sign}{whole}"),
            f if f % 10 == 0 => format!("{sign}{whole}.{}", f / 10),
            f => format!("{sign}{whole}.{f:02}"),
        }
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_decimal_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LocationInfo {
    pub province: String,
    pub city: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventCharacteristics {
    /// Raw code strings; validation checks membership and uniqueness.
    pub type_codes: Vec<String>,
    pub illegal_means: String,
    pub cybercrime: bool,
    pub completed_illegal_act: bool,
    pub case_closure: bool,
    pub police_handling: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CountedClaim {
    pub existence: bool,
    pub number: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AmountClaim {
    pub existence: bool,
    pub amount: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImpactAssessment {
    pub deaths: CountedClaim,
    pub injuries: CountedClaim,
    pub economic_losses: AmountClaim,
    pub social_impact: bool,
}

/// A structured record. The field types are permissive enough to hold a
/// candidate that breaks the codebook rules; [`validate`] decides.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub location: LocationInfo,
    pub event: EventCharacteristics,
    pub impact: ImpactAssessment,
}

/// The fifteen scored leaf fields, in codebook order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldPath {
    #[serde(rename = "location.province")]
    Province,
    #[serde(rename = "location.city")]
    City,
    #[serde(rename = "event.type_codes")]
    TypeCodes,
    #[serde(rename = "event.illegal_means")]
    IllegalMeans,
    #[serde(rename = "event.cybercrime")]
    Cybercrime,
    #[serde(rename = "event.completed_illegal_act")]
    CompletedIllegalAct,
    #[serde(rename = "event.case_closure")]
    CaseClosure,
    #[serde(rename = "event.police_handling")]
    PoliceHandling,
    #[serde(rename = "impact.deaths.existence")]
    DeathsExistence,
    #[serde(rename = "impact.deaths.number")]
    DeathsNumber,
    #[serde(rename = "impact.injuries.existence")]
    InjuriesExistence,
    #[serde(rename = "impact.injuries.number")]
    InjuriesNumber,
    #[serde(rename = "impact.economic_losses.existence")]
    LossesExistence,
    #[serde(rename = "impact.economic_losses.amount")]
    LossesAmount,
    #[serde(rename = "impact.social_impact")]
    SocialImpact,
}

impl FieldPath {
    pub const ALL: [FieldPath; 15] = [
        FieldPath::Province,
        FieldPath::City,
        FieldPath::TypeCodes,
        FieldPath::IllegalMeans,
        FieldPath::Cybercrime,
        FieldPath::CompletedIllegalAct,
        FieldPath::CaseClosure,
        FieldPath::PoliceHandling,
        FieldPath::DeathsExistence,
        FieldPath::DeathsNumber,
        FieldPath::InjuriesExistence,
        FieldPath::InjuriesNumber,
        FieldPath::LossesExistence,
        FieldPath::LossesAmount,
        FieldPath::SocialImpact,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FieldPath::Province => "location.province",
            FieldPath::City => "location.city",
            FieldPath::TypeCodes => "event.type_codes",
            FieldPath::IllegalMeans => "event.illegal_means",
            FieldPath::Cybercrime => "event.cybercrime",
            FieldPath::CompletedIllegalAct => "event.completed_illegal_act",
            FieldPath::CaseClosure => "event.case_closure",
            FieldPath::PoliceHandling => "event.police_handling",
            FieldPath::DeathsExistence => "impact.deaths.existence",
            FieldPath::DeathsNumber => "impact.deaths.number",
            FieldPath::InjuriesExistence => "impact.injuries.existence",
            FieldPath::InjuriesNumber => "impact.injuries.number",
            FieldPath::LossesExistence => "impact.economic_losses.existence",
            FieldPath::LossesAmount => "impact.economic_losses.amount",
            FieldPath::SocialImpact => "impact.social_impact",
        }
    }

    pub fn parse(s: &str) -> Option<FieldPath> {
        FieldPath::ALL.into_iter().find(|f| f.as_str() == s)
    }

    /// Canonical JSON key segments from the root to this leaf.
    pub fn json_keys(self) -> &'static [&'static str] {
        match self {
            FieldPath::Province => &["Location", "Province"],
            FieldPath::City => &["Location", "City"],
            FieldPath::TypeCodes => &["Event Characteristics", "Type Code"],
            FieldPath::IllegalMeans => &["Event Characteristics", "Illegal Means"],
            FieldPath::Cybercrime => &["Event Characteristics", "Cybercrime"],
            FieldPath::CompletedIllegalAct => &["Event Characteristics", "Completed Illegal Act"],
            FieldPath::CaseClosure => &["Event Characteristics", "Case Closure"],
            FieldPath::PoliceHandling => &["Event Characteristics", "Police Handling"],
            FieldPath::DeathsExistence => &["Impact Assessment", "Deaths", "Existence"],
            FieldPath::DeathsNumber => &["Impact Assessment", "Deaths", "Number"],
            FieldPath::InjuriesExistence => &["Impact Assessment", "Injuries", "Existence"],
            FieldPath::InjuriesNumber => &["Impact Assessment", "Injuries", "Number"],
            FieldPath::LossesExistence => &["Impact Assessment", "Economic Losses", "Existence"],
            FieldPath::LossesAmount => &["Impact Assessment", "Economic Losses", "Amount"],
            FieldPath::SocialImpact => &["Impact Assessment", "Social Impact"],
        }
    }

    pub fn kind(self) -> FieldKind {
        use FieldPath::*;
        match self {
            Province | City => FieldKind::Location,
            TypeCodes => FieldKind::Codes,
            IllegalMeans | PoliceHandling => FieldKind::Text,
            Cybercrime | CompletedIllegalAct | CaseClosure | DeathsExistence | InjuriesExistence
            | LossesExistence | SocialImpact => FieldKind::Bool,
            DeathsNumber | InjuriesNumber => FieldKind::Count,
            LossesAmount => FieldKind::Amount,
        }
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Location,
    Codes,
    Text,
    Bool,
    Count,
    Amount,
}

/// One leaf value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldValue {
    Bool(bool),
    Count(i64),
    Amount(Amount),
    Text(String),
    Codes(Vec<String>),
}

impl FieldValue {
    pub fn to_json(&self) -> Value {
        match self {
            FieldValue::Bool(b) => Value::Bool(*b),
            FieldValue::Count(n) => Value::from(*n),
            FieldValue::Amount(a) => amount_json(*a),
            FieldValue::Text(s) => Value::String(s.clone()),
            FieldValue::Codes(c) => Value::Array(c.iter().cloned().map(Value::String).collect()),
        }
    }

    /// Compact display for agreement exports.
    pub fn display(&self) -> String {
        match self {
            FieldValue::Bool(b) => b.to_string(),
            FieldValue::Count(n) => n.to_string(),
            FieldValue::Amount(a) => a.to_decimal_string(),
            FieldValue::Text(s) => s.clone(),
            FieldValue::Codes(c) => c.join(","),
        }
    }
}

fn amount_json(a: Amount) -> Value {
    // Integers must serialize without a fraction ("Amount":0).
    serde_json::from_str(&a.to_decimal_string()).unwrap_or(Value::from(0))
}

impl ExtractionRecord {
    pub fn get(&self, field: FieldPath) -> FieldValue {
        use FieldPath::*;
        match field {
            Province => FieldValue::Text(self.location.province.clone()),
            City => FieldValue::Text(self.location.city.clone()),
            TypeCodes => FieldValue::Codes(self.event.type_codes.clone()),
            IllegalMeans => FieldValue::Text(self.event.illegal_means.clone()),
            Cybercrime => FieldValue::Bool(self.event.cybercrime),
            CompletedIllegalAct => FieldValue::Bool(self.event.completed_illegal_act),
            CaseClosure => FieldValue::Bool(self.event.case_closure),
            PoliceHandling => FieldValue::Text(self.event.police_handling.clone()),
            DeathsExistence => FieldValue::Bool(self.impact.deaths.existence),
            DeathsNumber => FieldValue::Count(self.impact.deaths.number),
            InjuriesExistence => FieldValue::Bool(self.impact.injuries.existence),
            InjuriesNumber => FieldValue::Count(self.impact.injuries.number),
            LossesExistence => FieldValue::Bool(self.impact.economic_losses.existence),
            LossesAmount => FieldValue::Amount(self.impact.economic_losses.amount),
            SocialImpact => FieldValue::Bool(self.impact.social_impact),
        }
    }

    /// Sets one leaf. Returns false if the value kind does not fit the field.
    pub fn set(&mut self, field: FieldPath, value: FieldValue) -> bool {
        use FieldPath::*;
        match (field, value) {
            (Province, FieldValue::Text(s)) => self.location.province = s,
            (City, FieldValue::Text(s)) => self.location.city = s,
            (TypeCodes, FieldValue::Codes(c)) => self.event.type_codes = c,
            (IllegalMeans, FieldValue::Text(s)) => self.event.illegal_means = s,
            (Cybercrime, FieldValue::Bool(b)) => self.event.cybercrime = b,
            (CompletedIllegalAct, FieldValue::Bool(b)) => self.event.completed_illegal_act = b,
            (CaseClosure, FieldValue::Bool(b)) => self.event.case_closure = b,
            (PoliceHandling, FieldValue::Text(s)) => self.event.police_handling = s,
            (DeathsExistence, FieldValue::Bool(b)) => self.impact.deaths.existence = b,
            (DeathsNumber, FieldValue::Count(n)) => self.impact.deaths.number = n,
            (InjuriesExistence, FieldValue::Bool(b)) => self.impact.injuries.existence = b,
            (InjuriesNumber, FieldValue::Count(n)) => self.impact.injuries.number = n,
            (LossesExistence, FieldValue::Bool(b)) => self.impact.economic_losses.existence = b,
            (LossesAmount, FieldValue::Amount(a)) => self.impact.economic_losses.amount = a,
            (SocialImpact, FieldValue::Bool(b)) => self.impact.social_impact = b,
            _ => return false,
        }
        true
    }
}

/// Trims and folds full-width digits to ASCII.
pub fn canonicalize_location(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| match c {
            '０'..='９' => char::from_u32(c as u32 - '０' as u32 + '0' as u32).unwrap_or(c),
            _ => c,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownTypeCode,
    DuplicateTypeCode,
    EmptyTypeCodes,
    NegativeCount,
    NegativeAmount,
    ExistenceMismatch,
    UntrimmedLocation,
    MissingField,
    UnknownKey,
    TypeMismatch,
    CoercedValue,
    PrecisionLoss,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, kind: ViolationKind, message: impl Into<String>) -> Self {
        Violation { field: field.into(), kind, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn new() -> Self {
        ValidationReport { valid: true, violations: Vec::new(), warnings: Vec::new() }
    }

    pub fn violation(&mut self, v: Violation) {
        self.violations.push(v);
        self.valid = false;
    }

    pub fn warning(&mut self, v: Violation) {
        self.warnings.push(v);
    }

    pub fn merge(&mut self, other: ValidationReport) {
        for v in other.violations {
            self.violation(v);
        }
        self.warnings.extend(other.warnings);
    }
}

/// Checks the codebook rules on values that are present. `None` means the
/// leaf was not supplied and is skipped.
pub(crate) fn validate_leaves(get: impl Fn(FieldPath) -> Option<FieldValue>) -> ValidationReport {
    let mut report = ValidationReport::new();

    for field in [FieldPath::Province, FieldPath::City] {
        if let Some(FieldValue::Text(s)) = get(field) {
            if s.trim() != s {
                report.violation(Violation::new(
                    field.as_str(),
                    ViolationKind::UntrimmedLocation,
                    "location names must be whitespace-trimmed",
                ));
            }
        }
    }

    if let Some(FieldValue::Codes(codes)) = get(FieldPath::TypeCodes) {
        let path = FieldPath::TypeCodes.as_str();
        if codes.is_empty() {
            report.warning(Violation::new(path, ViolationKind::EmptyTypeCodes, "no case type selected"));
        }
        let mut seen = BTreeSet::new();
        for code in &codes {
            if TypeCode::parse(code).is_err() {
                report.violation(Violation::new(
                    path,
                    ViolationKind::UnknownTypeCode,
                    format!("{code:?} is not in the code table 01-11"),
                ));
            }
            if !seen.insert(code.as_str()) {
                report.violation(Violation::new(path, ViolationKind::DuplicateTypeCode, format!("{code:?} repeated")));
            }
        }
    }

    let claims = [
        ("impact.deaths", FieldPath::DeathsExistence, FieldPath::DeathsNumber),
        ("impact.injuries", FieldPath::InjuriesExistence, FieldPath::InjuriesNumber),
    ];
    for (claim, exist_path, number_path) in claims {
        let number = match get(number_path) {
            Some(FieldValue::Count(n)) => Some(n),
            _ => None,
        };
        if let Some(n) = number {
            if n < 0 {
                report.violation(Violation::new(number_path.as_str(), ViolationKind::NegativeCount, format!("count {n} < 0")));
            }
        }
        if let (Some(FieldValue::Bool(false)), Some(n)) = (get(exist_path), number) {
            if n != 0 {
                report.violation(Violation::new(
                    claim,
                    ViolationKind::ExistenceMismatch,
                    format!("existence is false but number is {n}"),
                ));
            }
        }
    }

    let amount = match get(FieldPath::LossesAmount) {
        Some(FieldValue::Amount(a)) => Some(a),
        _ => None,
    };
    if let Some(a) = amount {
        if a.is_negative() {
            report.violation(Violation::new(
                FieldPath::LossesAmount.as_str(),
                ViolationKind::NegativeAmount,
                format!("amount {a} < 0"),
            ));
        }
    }
    if let (Some(FieldValue::Bool(false)), Some(a)) = (get(FieldPath::LossesExistence), amount) {
        if a != Amount::ZERO {
            report.violation(Violation::new(
                "impact.economic_losses",
                ViolationKind::ExistenceMismatch,
                format!("existence is false but amount is {a}"),
            ));
        }
    }

    report
}

/// Checks every codebook invariant. Violations are data, never an `Err`.
pub fn validate(record: &ExtractionRecord) -> ValidationReport {
    validate_leaves(|f| Some(record.get(f)))
}

/// Serializes a valid record with the canonical keys, key order and no
/// insignificant whitespace. Type codes are emitted in ascending order.
pub fn canonical_json(record: &ExtractionRecord) -> Result<String, SchemaError> {
    let report = validate(record);
    if !report.valid {
        let msg = report
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.message))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(SchemaError::InvalidRecord(msg));
    }
    Ok(canonical_json_unchecked(record))
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

fn counted(c: &CountedClaim) -> String {
    format!(r#"{{"Existence":{},"Number":{}}}"#, c.existence, c.number)
}

pub(crate) fn canonical_json_unchecked(r: &ExtractionRecord) -> String {
    let mut codes = r.event.type_codes.clone();
    codes.sort();
    let codes = codes.iter().map(|c| json_str(c)).collect::<Vec<_>>().join(",");
    let e = &r.event;
    let i = &r.impact;
    format!(
        concat!(
            r#"{{"Location":{{"Province":{},"City":{}}},"#,
            r#""Event Characteristics":{{"Type Code":[{}],"Illegal Means":{},"Cybercrime":{},"Completed Illegal Act":{},"Case Closure":{},"Police Handling":{}}},"#,
            r#""Impact Assessment":{{"Deaths":{},"Injuries":{},"Economic Losses":{{"Existence":{},"Amount":{}}},"Social Impact":{}}}}}"#
        ),
        json_str(&r.location.province),
        json_str(&r.location.city),
        codes,
        json_str(&e.illegal_means),
        e.cybercrime,
        e.completed_illegal_act,
        e.case_closure,
        json_str(&e.police_handling),
        counted(&i.deaths),
        counted(&i.injuries),
        i.economic_losses.existence,
        i.economic_losses.amount.to_decimal_string(),
        i.social_impact,
    )
}

fn lookup<'a>(root: &'a Value, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().try_fold(root, |v, k| v.as_object()?.get(*k))
}

/// Reads a record written with the canonical keys. Every leaf must be
/// present with its exact JSON type.
pub fn record_from_value(value: &Value) -> Result<ExtractionRecord, SchemaError> {
    let mut record = ExtractionRecord::default();
    for field in FieldPath::ALL {
        let v = lookup(value, field.json_keys())
            .ok_or_else(|| SchemaError::Malformed(format!("missing {}", field.json_keys().join("/"))))?;
        let fv = strict_leaf(field, v).ok_or_else(|| SchemaError::Malformed(format!("bad value for {field}: {v}")))?;
        record.set(field, fv);
    }
    Ok(record)
}

pub(crate) fn strict_leaf(field: FieldPath, v: &Value) -> Option<FieldValue> {
    match field.kind() {
        FieldKind::Location | FieldKind::Text => v.as_str().map(|s| FieldValue::Text(s.to_string())),
        FieldKind::Bool => v.as_bool().map(FieldValue::Bool),
        FieldKind::Count => v.as_i64().map(FieldValue::Count),
        FieldKind::Amount => match v {
            Value::Number(n) => Amount::parse_decimal(&n.to_string()).map(|(a, _)| FieldValue::Amount(a)),
            _ => None,
        },
        FieldKind::Codes => v
            .as_array()?
            .iter()
            .map(|c| c.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()
            .map(FieldValue::Codes),
    }
}

pub fn parse_canonical(text: &str) -> Result<ExtractionRecord, SchemaError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SchemaError::Malformed(e.to_string()))?;
    record_from_value(&value)
}

/// Nested JSON value with canonical keys, for embedding in other documents.
pub fn canonical_value(record: &ExtractionRecord) -> Value {
    let mut root = Map::new();
    for field in FieldPath::ALL {
        let keys = field.json_keys();
        let mut node = &mut root;
        for k in &keys[..keys.len() - 1] {
            node = node
                .entry(k.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("intermediate nodes are objects");
        }
        let mut leaf = record.get(field);
        if let FieldValue::Codes(c) = &mut leaf {
            c.sort();
        }
        node.insert(keys[keys.len() - 1].to_string(), leaf.to_json());
    }
    Value::Object(root)
}

/// One line of a gold annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldRecord {
    pub record_id: String,
    pub record: ExtractionRecord,
}

impl GoldRecord {
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"record_id\":{},\"record\":{}}}",
            json_str(&self.record_id),
            canonical_json_unchecked(&self.record)
        )
    }

    pub fn from_json_line(line: &str) -> Result<GoldRecord, SchemaError> {
        let value: Value = serde_json::from_str(line).map_err(|e| SchemaError::Malformed(e.to_string()))?;
        let record_id = value
            .get("record_id")
            .and_then(Value::as_str)
            .ok_or_else(|| SchemaError::Malformed("missing record_id".into()))?
            .to_string();
        let record = record_from_value(value.get("record").ok_or_else(|| SchemaError::Malformed("missing record".into()))?)?;
        Ok(GoldRecord { record_id, record })
    }
}
