//! The prediction grid: one label per (model, inference policy, item).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{parse_label, Dataset, Label};

/// Decoding temperature, compared by its configured decimal text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(String);

impl Temperature {
    pub fn new(text: impl Into<String>) -> Self {
        Temperature(text.into().trim().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Rubric plus decoding temperature: what determines the emitted labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InferencePolicy {
    pub rubric: String,
    pub temperature: Temperature,
}

impl InferencePolicy {
    pub fn new(rubric: impl Into<String>, temperature: impl Into<String>) -> Self {
        InferencePolicy {
            rubric: rubric.into(),
            temperature: Temperature::new(temperature),
        }
    }
}

impl fmt::Display for InferencePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.rubric, self.temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricId {
    A1,
    A2,
    A3,
    A4,
    A5,
}

impl MetricId {
    pub const ALL: [MetricId; 5] = [
        MetricId::A1,
        MetricId::A2,
        MetricId::A3,
        MetricId::A4,
        MetricId::A5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricId::A1 => "exact accuracy",
            MetricId::A2 => "macro-F1",
            MetricId::A3 => "within-one accuracy",
            MetricId::A4 => "weighted kappa",
            MetricId::A5 => "worst-class accuracy",
        }
    }

    pub fn parse(s: &str) -> Option<MetricId> {
        MetricId::ALL
            .into_iter()
            .find(|m| format!("{m:?}").eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub model: String,
    pub policy: InferencePolicy,
    pub item_id: usize,
    pub label: Label,
    pub confidence: Option<f64>,
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellKey {
    pub model: String,
    pub policy: InferencePolicy,
    pub item_id: usize,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, item {})", self.model, self.policy, self.item_id)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("declared grid is empty")]
    EmptyDeclaredGrid,
    #[error("duplicate prediction for {0}")]
    DuplicateCell(CellKey),
    #[error("{} declared cell(s) missing, first: {}", .0.len(), .0[0])]
    MissingCell(Vec<CellKey>),
    #[error("item {0} is not in the dataset")]
    UnknownItem(usize),
    #[error("model `{0}` is not in the declared grid")]
    UnknownModel(String),
    #[error("policy `{0}` is not in the declared grid")]
    UnknownPolicy(InferencePolicy),
    #[error("no cell for model `{model}` under policy {policy}")]
    UnknownCell {
        model: String,
        policy: InferencePolicy,
    },
    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("confidence {0} is outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Models and policies a prediction file is expected to cover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredGrid {
    pub models: Vec<String>,
    pub policies: Vec<InferencePolicy>,
}

impl DeclaredGrid {
    /// Full factorial rubric × temperature product, rubric-major.
    pub fn factorial(models: Vec<String>, rubrics: &[String], temperatures: &[String]) -> Self {
        let policies = rubrics
            .iter()
            .flat_map(|r| temperatures.iter().map(move |t| InferencePolicy::new(r.clone(), t.clone())))
            .collect();
        DeclaredGrid { models, policies }
    }
}

/// Dense, immutable label grid, aligned to dataset item order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    models: Vec<String>,
    policies: Vec<InferencePolicy>,
    n_items: usize,
    /// Indexed `(model * policies + policy) * n_items + item`.
    labels: Vec<Label>,
}

impl PredictionGrid {
    /// Assembles a grid from records, which may arrive in any order.
    pub fn from_records<I>(records: I, n_items: usize, declared: &DeclaredGrid) -> Result<Self, GridError>
    where
        I: IntoIterator<Item = PredictionRecord>,
    {
        if declared.models.is_empty() || declared.policies.is_empty() || n_items == 0 {
            return Err(GridError::EmptyDeclaredGrid);
        }
        let model_ix: HashMap<&str, usize> = declared
            .models
            .iter()
            .enumerate()
            .map(|(i, m)| (m.as_str(), i))
            .collect();
        let policy_ix: HashMap<&InferencePolicy, usize> =
            declared.policies.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let n_pol = declared.policies.len();
        let mut slots: Vec<Option<Label>> = vec![None; declared.models.len() * n_pol * n_items];

        for rec in records {
            if let Some(c) = rec.confidence {
                if !(0.0..=1.0).contains(&c) {
                    return Err(GridError::ConfidenceOutOfRange(c));
                }
            }
            let m = *model_ix
                .get(rec.model.as_str())
                .ok_or_else(|| GridError::UnknownModel(rec.model.clone()))?;
            let p = *policy_ix
                .get(&rec.policy)
                .ok_or_else(|| GridError::UnknownPolicy(rec.policy.clone()))?;
            if rec.item_id >= n_items {
                return Err(GridError::UnknownItem(rec.item_id));
            }
            let slot = &mut slots[(m * n_pol + p) * n_items + rec.item_id];
            if slot.is_some() {
                return Err(GridError::DuplicateCell(CellKey {
                    model: rec.model,
                    policy: rec.policy,
                    item_id: rec.item_id,
                }));
            }
            *slot = Some(rec.label);
        }

        let mut missing = Vec::new();
        for (m, model) in declared.models.iter().enumerate() {
            for (p, policy) in declared.policies.iter().enumerate() {
                for item_id in 0..n_items {
                    if slots[(m * n_pol + p) * n_items + item_id].is_none() {
                        missing.push(CellKey {
                            model: model.clone(),
                            policy: policy.clone(),
                            item_id,
                        });
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(GridError::MissingCell(missing));
        }
        Ok(PredictionGrid {
            models: declared.models.clone(),
            policies: declared.policies.clone(),
            n_items,
            labels: slots.into_iter().map(|s| s.expect("checked complete")).collect(),
        })
    }

    /// Builds a grid from per-cell label vectors ordered model-major then policy.
    pub fn from_cells(declared: &DeclaredGrid, cells: Vec<Vec<Label>>) -> Result<Self, GridError> {
        let n_items = cells.first().map_or(0, Vec::len);
        let expected = declared.models.len() * declared.policies.len();
        if n_items == 0 || cells.len() != expected {
            return Err(GridError::EmptyDeclaredGrid);
        }
        let records = cells.into_iter().enumerate().flat_map(|(c, labels)| {
            let model = declared.models[c / declared.policies.len()].clone();
            let policy = declared.policies[c % declared.policies.len()].clone();
            labels.into_iter().enumerate().map(move |(item_id, label)| PredictionRecord {
                model: model.clone(),
                policy: policy.clone(),
                item_id,
                label,
                confidence: None,
                reasoning: None,
            })
        });
        Self::from_records(records, n_items, declared)
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn policies(&self) -> &[InferencePolicy] {
        &self.policies
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn cell_count(&self) -> usize {
        self.labels.len()
    }

    pub fn rubrics(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for p in &self.policies {
            if !seen.contains(&p.rubric) {
                seen.push(p.rubric.clone());
            }
        }
        seen
    }

    pub fn temperatures(&self) -> Vec<Temperature> {
        let mut seen = Vec::new();
        for p in &self.policies {
            if !seen.contains(&p.temperature) {
                seen.push(p.temperature.clone());
            }
        }
        seen
    }

    fn offset(&self, model: &str, policy: &InferencePolicy) -> Result<usize, GridError> {
        let unknown = || GridError::UnknownCell {
            model: model.to_string(),
            policy: policy.clone(),
        };
        let m = self.models.iter().position(|x| x == model).ok_or_else(unknown)?;
        let p = self.policies.iter().position(|x| x == policy).ok_or_else(unknown)?;
        Ok((m * self.policies.len() + p) * self.n_items)
    }

    /// Labels for one cell in item-id order.
    pub fn cell_labels(&self, model: &str, policy: &InferencePolicy) -> Result<&[Label], GridError> {
        let start = self.offset(model, policy)?;
        Ok(&self.labels[start..start + self.n_items])
    }

    /// Per-item exact-match indicator against gold.
    pub fn correctness_vector(
        &self,
        model: &str,
        policy: &InferencePolicy,
        dataset: &Dataset,
    ) -> Result<Vec<bool>, GridError> {
        let labels = self.cell_labels(model, policy)?;
        Ok(labels
            .iter()
            .zip(dataset.items())
            .map(|(l, item)| *l == item.gold)
            .collect())
    }
}

fn parse_prediction_line(line: &str) -> Result<PredictionRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record is not an object")?;
    let text = |key: &str| -> Result<String, String> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Number(n)) if key == "temperature" => Ok(n.to_string()),
            Some(_) => Err(format!("field `{key}` has the wrong type")),
            None => Err(format!("missing field `{key}`")),
        }
    };
    let item_id = obj
        .get("item_id")
        .and_then(Value::as_u64)
        .ok_or("missing or non-integer `item_id`")? as usize;
    let label = match obj.get("label") {
        Some(Value::String(s)) => parse_label(s).map_err(|e| e.to_string())?,
        Some(Value::Number(n)) => {
            let v = n.as_i64().ok_or("non-integer label")?;
            Label::new(v).map_err(|e| e.to_string())?
        }
        _ => return Err("missing or malformed `label`".into()),
    };
    let confidence = match obj.get("confidence") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or("non-numeric confidence")?),
    };
    let reasoning = obj.get("reasoning").and_then(Value::as_str).map(str::to_string);
    Ok(PredictionRecord {
        model: text("model")?,
        policy: InferencePolicy::new(text("rubric")?, text("temperature")?),
        item_id,
        label,
        confidence,
        reasoning,
    })
}

/// Parses prediction-file text against a dataset and declared grid.
pub fn parse_predictions(text: &str, dataset: &Dataset, declared: &DeclaredGrid) -> Result<PredictionGrid, GridError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_prediction_line(line).map_err(|message| GridError::MalformedRecord {
            line: i + 1,
            message,
        })?;
        records.push(rec);
    }
    PredictionGrid::from_records(records, dataset.n(), declared)
}

pub fn load_predictions(path: &Path, dataset: &Dataset, declared: &DeclaredGrid) -> Result<PredictionGrid, GridError> {
    let text = std::fs::read_to_string(path).map_err(|e| GridError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_predictions(&text, dataset, declared)
}

/// Writes one prediction record per line in the prediction-file format.
pub fn serialize_predictions(grid: &PredictionGrid) -> String {
    let mut out = String::new();
    for model in &grid.models {
        for policy in &grid.policies {
            let labels = grid.cell_labels(model, policy).expect("own cell");
            for (item_id, label) in labels.iter().enumerate() {
                let mut row = BTreeMap::new();
                row.insert("model", Value::from(model.as_str()));
                row.insert("rubric", Value::from(policy.rubric.as_str()));
                row.insert("temperature", Value::from(policy.temperature.as_str()));
                row.insert("item_id", Value::from(item_id));
                row.insert("label", Value::from(label.value()));
                out.push_str(&serde_json::to_string(&row).expect("json"));
                out.push('\n');
            }
        }
    }
    out
}
