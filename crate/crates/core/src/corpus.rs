//! Gold-label dataset ingestion and provenance pinning.
//!
//! A dataset file holds one JSON object per line. Two record shapes are
//! accepted:
//!
//! * `{"question": .., "response": .., "label": ..}` (the canonical form), or
//! * `{"text": "Financial Question: .. Company Response: ..", "label": ..}`
//!   (the upstream single-string form, split by [`parse_item_text`]).
//!
//! Labels may be JSON integers or signed decimal strings such as `"+1"`.
//!
//! The manifest checksum is SHA-256 over [`canonical_serialization`]: UTF-8,
//! one compact JSON object per line with fields `question`, `response`,
//! `label` in that order, the label written as a string carrying an explicit
//! `+` for positive values, LF line endings, no trailing whitespace.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const QUESTION_MARKER: &str = "Financial Question:";
pub const RESPONSE_MARKER: &str = "Company Response:";

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("label `{0}` is outside the five-level scale -2..+2")]
    LabelOutOfRange(String),
    #[error("label `{0}` is not a signed integer token")]
    MalformedLabel(String),
    #[error("record is not a valid JSON object: {0}")]
    MalformedRecord(String),
    #[error("record is missing field `{0}`")]
    MissingField(&'static str),
    #[error("dataset has zero rows")]
    EmptyDataset,
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(
        "dataset checksum {actual} does not match pinned {expected}: \
         treat this as a new measurement event, not a silent update"
    )]
    ChecksumMismatch { expected: String, actual: String },
    #[error("manifest row_count {manifest} does not match dataset size {dataset}")]
    RowCountMismatch { manifest: usize, dataset: usize },
}

impl CorpusError {
    fn at(self, line: usize) -> Self {
        CorpusError::AtLine {
            line,
            source: Box::new(self),
        }
    }
}

/// One of the five ordinal levels -2..=+2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub struct Label(i8);

impl Label {
    pub const MIN: i8 = -2;
    pub const MAX: i8 = 2;
    /// All levels in ascending order.
    pub const ALL: [Label; 5] = [Label(-2), Label(-1), Label(0), Label(1), Label(2)];

    pub fn new(value: i64) -> Result<Self, CorpusError> {
        if (Self::MIN as i64..=Self::MAX as i64).contains(&value) {
            Ok(Label(value as i8))
        } else {
            Err(CorpusError::LabelOutOfRange(value.to_string()))
        }
    }

    pub fn value(self) -> i8 {
        self.0
    }

    /// Position on the scale, 0 for -2 through 4 for +2.
    pub fn index(self) -> usize {
        (self.0 - Self::MIN) as usize
    }

    pub fn from_index(index: usize) -> Label {
        Label::ALL[index]
    }

    /// Ordinal distance between two labels.
    pub fn distance(self, other: Label) -> u8 {
        (self.0 - other.0).unsigned_abs()
    }
}

impl TryFrom<i8> for Label {
    type Error = CorpusError;
    fn try_from(v: i8) -> Result<Self, Self::Error> {
        Label::new(v as i64)
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        l.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 > 0 {
            write!(f, "+{}", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: usize,
    pub question: String,
    pub response: String,
    pub gold: Label,
}

/// Items in id order; ids are dense over `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    items: Vec<Item>,
}

impl Dataset {
    /// Builds a dataset from (question, response, gold) triples, assigning
    /// dense ids in order.
    pub fn from_rows<I>(rows: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (String, String, Label)>,
    {
        let items: Vec<Item> = rows
            .into_iter()
            .enumerate()
            .map(|(id, (question, response, gold))| Item {
                id,
                question,
                response,
                gold,
            })
            .collect();
        if items.is_empty() {
            return Err(CorpusError::EmptyDataset);
        }
        Ok(Dataset { items })
    }

    /// A dataset with placeholder text, used for synthetic fixtures.
    pub fn from_gold(gold: &[Label]) -> Result<Self, CorpusError> {
        Self::from_rows(gold.iter().enumerate().map(|(i, &g)| {
            (
                format!("synthetic question {i}"),
                format!("synthetic response {i}"),
                g,
            )
        }))
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn gold(&self) -> Vec<Label> {
        self.items.iter().map(|it| it.gold).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: BTreeMap<Label, usize>,
    pub proportions: BTreeMap<Label, f64>,
}

impl ClassDistribution {
    pub fn from_labels(labels: &[Label]) -> Self {
        let mut counts = BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        let n = labels.len() as f64;
        let proportions = counts.iter().map(|(&l, &c)| (l, c as f64 / n)).collect();
        ClassDistribution {
            counts,
            proportions,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn count(&self, label: Label) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_id: String,
    pub access_date: NaiveDate,
    pub row_count: usize,
    pub checksum: String,
    pub independence_unit: String,
}

impl DatasetManifest {
    /// Recomputes the checksum and row count from `dataset` and compares.
    pub fn verify(&self, dataset: &Dataset) -> Result<(), CorpusError> {
        if self.row_count != dataset.n() {
            return Err(CorpusError::RowCountMismatch {
                manifest: self.row_count,
                dataset: dataset.n(),
            });
        }
        check_expected_checksum(&self.checksum, &checksum(dataset))
    }
}

/// Splits an upstream `Financial Question: .. Company Response: ..` string.
pub fn parse_item_text(raw: &str) -> Result<(String, String), CorpusError> {
    let q_hits = raw.matches(QUESTION_MARKER).count();
    let r_hits = raw.matches(RESPONSE_MARKER).count();
    if q_hits != 1 || r_hits != 1 {
        return Err(CorpusError::TemplateMismatch(format!(
            "expected one `{QUESTION_MARKER}` and one `{RESPONSE_MARKER}`, found {q_hits} and {r_hits}"
        )));
    }
    let q_at = raw.find(QUESTION_MARKER).expect("counted above");
    let r_at = raw.find(RESPONSE_MARKER).expect("counted above");
    if r_at < q_at {
        return Err(CorpusError::TemplateMismatch(
            "response field precedes question field".into(),
        ));
    }
    if !raw[..q_at].trim().is_empty() {
        return Err(CorpusError::TemplateMismatch(
            "unexpected text before the question field".into(),
        ));
    }
    let question = raw[q_at + QUESTION_MARKER.len()..r_at].trim();
    let response = raw[r_at + RESPONSE_MARKER.len()..].trim();
    if question.is_empty() || response.is_empty() {
        return Err(CorpusError::TemplateMismatch("empty field".into()));
    }
    Ok((question.to_string(), response.to_string()))
}

/// Parses a signed decimal label token; a leading `+` is accepted.
pub fn parse_label(raw: &str) -> Result<Label, CorpusError> {
    let token = raw.trim();
    let digits = token.strip_prefix('+').unwrap_or(token);
    if digits.starts_with('+') || digits.is_empty() {
        return Err(CorpusError::MalformedLabel(raw.to_string()));
    }
    let value: i64 = digits
        .parse()
        .map_err(|_| CorpusError::MalformedLabel(raw.to_string()))?;
    Label::new(value).map_err(|_| CorpusError::LabelOutOfRange(raw.to_string()))
}

fn label_from_json(v: &Value) -> Result<Label, CorpusError> {
    match v {
        Value::String(s) => parse_label(s),
        Value::Number(n) => match n.as_i64() {
            Some(i) => Label::new(i),
            None => Err(CorpusError::MalformedLabel(n.to_string())),
        },
        other => Err(CorpusError::MalformedLabel(other.to_string())),
    }
}

fn text_field(obj: &serde_json::Map<String, Value>, key: &'static str) -> Result<String, CorpusError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(CorpusError::MalformedRecord(format!(
            "field `{key}` must be a string, got {other}"
        ))),
        None => Err(CorpusError::MissingField(key)),
    }
}

/// Parses one dataset record (either accepted shape).
pub fn parse_record(line: &str) -> Result<(String, String, Label), CorpusError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CorpusError::MalformedRecord("not an object".into()))?;
    let label = label_from_json(obj.get("label").ok_or(CorpusError::MissingField("label"))?)?;
    let (question, response) = if obj.contains_key("question") || obj.contains_key("response") {
        let q = text_field(obj, "question")?.trim().to_string();
        let r = text_field(obj, "response")?.trim().to_string();
        if q.is_empty() || r.is_empty() {
            return Err(CorpusError::TemplateMismatch("empty field".into()));
        }
        (q, r)
    } else {
        parse_item_text(&text_field(obj, "text")?)?
    };
    Ok((question, response, label))
}

/// Parses dataset text. Blank lines are skipped; line numbers in errors are
/// 1-based physical lines.
pub fn parse_dataset(text: &str) -> Result<(Dataset, ClassDistribution), CorpusError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_record(line).map_err(|e| e.at(i + 1))?);
    }
    let dataset = Dataset::from_rows(rows)?;
    let dist = ClassDistribution::from_labels(&dataset.gold());
    Ok((dataset, dist))
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, ClassDistribution), CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_dataset(&text)
}

#[derive(Serialize)]
struct CanonicalRow<'a> {
    question: &'a str,
    response: &'a str,
    label: String,
}

/// The byte-exact form the checksum is computed over.
pub fn canonical_serialization(dataset: &Dataset) -> String {
    let mut out = String::new();
    for item in dataset.items() {
        let row = CanonicalRow {
            question: &item.question,
            response: &item.response,
            label: item.gold.to_string(),
        };
        out.push_str(&serde_json::to_string(&row).expect("plain strings serialize"));
        out.push('\n');
    }
    out
}

/// Lowercase hex SHA-256 of the canonical serialization.
pub fn checksum(dataset: &Dataset) -> String {
    hex::encode(Sha256::digest(canonical_serialization(dataset).as_bytes()))
}

pub fn compute_manifest(dataset: &Dataset, source_id: &str, access_date: NaiveDate) -> DatasetManifest {
    DatasetManifest {
        source_id: source_id.to_string(),
        access_date,
        row_count: dataset.n(),
        checksum: checksum(dataset),
        independence_unit: "item".to_string(),
    }
}

/// A pinned checksum that differs from the computed one is always fatal.
pub fn check_expected_checksum(expected: &str, actual: &str) -> Result<(), CorpusError> {
    if expected.trim().eq_ignore_ascii_case(actual) {
        Ok(())
    } else {
        Err(CorpusError::ChecksumMismatch {
            expected: expected.trim().to_lowercase(),
            actual: actual.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_template() {
        let (q, r) = parse_item_text("Financial Question: Q1 Company Response: A1").unwrap();
        assert_eq!((q.as_str(), r.as_str()), ("Q1", "A1"));
    }

    #[test]
    fn keeps_interior_whitespace() {
        let (q, r) =
            parse_item_text("  Financial Question:  a  b \n Company Response:\tc   d  ").unwrap();
        assert_eq!(q, "a  b");
        assert_eq!(r, "c   d");
    }

    #[test]
    fn reversed_fields_rejected() {
        let err = parse_item_text("Company Response: A Financial Question: Q").unwrap_err();
        assert!(matches!(err, CorpusError::TemplateMismatch(_)));
    }

    #[test]
    fn ambiguous_template_rejected() {
        let raw = "Financial Question: Q Company Response: A Company Response: B";
        assert!(matches!(
            parse_item_text(raw),
            Err(CorpusError::TemplateMismatch(_))
        ));
        assert!(parse_item_text("no markers at all").is_err());
        assert!(parse_item_text("Financial Question: Company Response: A").is_err());
    }

    #[test]
    fn label_tokens() {
        assert_eq!(parse_label("+1").unwrap().value(), 1);
        assert_eq!(parse_label("0").unwrap().value(), 0);
        assert_eq!(parse_label("-2").unwrap().value(), -2);
        assert_eq!(
            parse_label("3"),
            Err(CorpusError::LabelOutOfRange("3".into()))
        );
        assert!(matches!(parse_label("++1"), Err(CorpusError::MalformedLabel(_))));
        assert!(matches!(parse_label("one"), Err(CorpusError::MalformedLabel(_))));
        assert!(matches!(parse_label("1.0"), Err(CorpusError::MalformedLabel(_))));
    }

    #[test]
    fn label_display_has_explicit_plus() {
        let shown: Vec<String> = Label::ALL.iter().map(|l| l.to_string()).collect();
        assert_eq!(shown, ["-2", "-1", "0", "+1", "+2"]);
    }

    #[test]
    fn single_item_distribution() {
        let (ds, dist) = parse_dataset(r#"{"question":"q","response":"r","label":0}"#).unwrap();
        assert_eq!(ds.n(), 1);
        assert_eq!(dist.counts.len(), 1);
        assert_eq!(dist.count(Label::new(0).unwrap()), 1);
        assert_eq!(dist.proportions[&Label::new(0).unwrap()], 1.0);
    }

    #[test]
    fn bad_label_reports_line_number() {
        let mut text = String::new();
        for i in 0..6 {
            text.push_str(&format!("{{\"question\":\"q{i}\",\"response\":\"r\",\"label\":1}}\n"));
        }
        text.push_str("{\"question\":\"q\",\"response\":\"r\",\"label\":\"+3\"}\n");
        let err = parse_dataset(&text).unwrap_err();
        match err {
            CorpusError::AtLine { line, source } => {
                assert_eq!(line, 7);
                assert!(matches!(*source, CorpusError::LabelOutOfRange(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_string_contains(&text, "line 7"));
    }

    fn err_string_contains(text: &str, needle: &str) -> bool {
        parse_dataset(text).unwrap_err().to_string().contains(needle)
    }

    #[test]
    fn empty_file_is_an_error() {
        assert_eq!(parse_dataset("\n\n").unwrap_err(), CorpusError::EmptyDataset);
    }

    #[test]
    fn template_records_are_split() {
        let line = r#"{"text":"Financial Question: 配当は? Company Response: 検討します","label":"+1"}"#;
        let (ds, _) = parse_dataset(line).unwrap();
        assert_eq!(ds.items()[0].question, "配当は?");
        assert_eq!(ds.items()[0].response, "検討します");
        assert_eq!(ds.items()[0].gold.value(), 1);
    }

    #[test]
    fn canonical_form_layout() {
        let ds = Dataset::from_rows(vec![
            ("q".into(), "r".into(), Label::new(1).unwrap()),
            ("q2".into(), "\"x\"".into(), Label::new(-2).unwrap()),
        ])
        .unwrap();
        assert_eq!(
            canonical_serialization(&ds),
            "{\"question\":\"q\",\"response\":\"r\",\"label\":\"+1\"}\n\
             {\"question\":\"q2\",\"response\":\"\\\"x\\\"\",\"label\":\"-2\"}\n"
        );
    }

    #[test]
    fn manifest_is_deterministic_and_mutation_sensitive() {
        let ds = Dataset::from_gold(&[Label::new(0).unwrap(), Label::new(1).unwrap()]).unwrap();
        let date = NaiveDate::from_ymd_opt(2026, 4, 28).unwrap();
        let a = compute_manifest(&ds, "src", date);
        let b = compute_manifest(&ds.clone(), "src", date);
        assert_eq!(a, b);
        assert_eq!(a.checksum.len(), 64);
        assert_eq!(a.independence_unit, "item");
        a.verify(&ds).unwrap();

        let mut items = ds.items().to_vec();
        items[1].gold = Label::new(2).unwrap();
        let edited = Dataset::from_rows(items.into_iter().map(|i| (i.question, i.response, i.gold))).unwrap();
        assert_ne!(checksum(&edited), a.checksum);
        assert!(matches!(a.verify(&edited), Err(CorpusError::ChecksumMismatch { .. })));
    }

    #[test]
    fn checksum_mismatch_names_measurement_event() {
        let err = check_expected_checksum("abc", "def").unwrap_err();
        assert!(err.to_string().contains("new measurement event"));
        assert!(check_expected_checksum("ABC", "abc").is_ok());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        prop::collection::vec(("[^\\s]([ -~éあ]{0,12}[^\\s])?", "[^\\s]{1,10}", -2i64..=2), 1..20)
            .prop_map(|rows| {
                Dataset::from_rows(
                    rows.into_iter()
                        .map(|(q, r, l)| (q, r, Label::new(l).unwrap())),
                )
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn canonical_round_trip(ds in arb_dataset()) {
            let text = canonical_serialization(&ds);
            let (back, dist) = parse_dataset(&text).unwrap();
            prop_assert_eq!(canonical_serialization(&back), text);
            prop_assert_eq!(checksum(&back), checksum(&ds));
            prop_assert_eq!(dist.total(), ds.n());
            for item in ds.items() {
                prop_assert!(dist.count(item.gold) > 0);
            }
            let psum: f64 = dist.proportions.values().sum();
            prop_assert!((psum - 1.0).abs() < 1e-12);
        }
    }
}
