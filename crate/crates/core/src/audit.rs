//! End-to-end audit: configuration, the staged pipeline, the inversion grid,
//! and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::agreement::{agreement_table, chance_agreement, swap_stratification, AgreementError, AgreementRow, SwapStratum};
use crate::corpus::{
    check_expected_checksum, compute_manifest, load_dataset, ClassDistribution, CorpusError, Dataset, DatasetManifest,
    Label,
};
use crate::grid::{load_predictions, DeclaredGrid, GridError, InferencePolicy, MetricId, PredictionGrid, Temperature};
use crate::identify::{
    default_lomo_subsets, effective_support, evaluate_rule, headroom, lomo_decomposition, noise_estimates, pass_set,
    DiagnosticRow, Diagnostics, IdentifyError, LomoRow, MetricSubset, ThresholdTriple, DEFAULT_LOMO_AGGREGATORS,
};
use crate::metrics::{
    binomial_interval, majority_baseline, mcnemar_mde, modal_class, Confusion, IntervalEstimate, IntervalMethod,
    KappaWeighting, MetricError,
};
use crate::rank::{
    aggregate, condorcet, dimension_sensitivity, per_policy_rankings, permutation_t, AggregateOutcome, Aggregator,
    CondorcetResult, Dimension, PairwiseOutcomes, PermutationT, RankError, ScoreTable,
};
use crate::resample::{
    bh_fdr, clustered_bootstrap, holm_correction, paired_delta_test, signflip_randomization, ResampleError,
    ResamplePlan, SIGNFLIP_STREAM_BASE,
};
use crate::synth::{default_cells, default_triples, threshold_sweep, SimCell, SimOutcome, SweepConfig, SynthError};

/// Reported H values further than this from the computed ones raise a note.
pub const REFERENCE_TOLERANCE: f64 = 0.005;

pub const TOOL_NAME: &str = "ordaudit";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
    #[error("malformed report: {0}")]
    Report(String),
}

impl AuditError {
    /// 2 configuration, 3 data or provenance, 4 statistical degeneracy.
    pub fn exit_code(&self) -> i32 {
        match self {
            AuditError::Config(_) => 2,
            AuditError::Corpus(_) | AuditError::Grid(_) | AuditError::Output { .. } | AuditError::Report(_) => 3,
            AuditError::Identify(IdentifyError::InvalidThreshold { .. }) => 2,
            AuditError::Identify(IdentifyError::Grid(_)) | AuditError::Agreement(AgreementError::Grid(_)) => 3,
            AuditError::Rank(RankError::Grid(_)) => 3,
            _ => 4,
        }
    }
}

/// Failure of one pipeline stage, with the stages that completed before it.
#[derive(Debug, Error)]
#[error("stage `{stage}` failed after [{}]: {error}", completed.join(", "))]
pub struct AuditFailure {
    pub stage: String,
    pub completed: Vec<String>,
    #[source]
    pub error: AuditError,
}

impl AuditFailure {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

fn text_or_numbers<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum TextOrNumber {
        Text(String),
        Int(i64),
        Float(f64),
    }
    Ok(Vec::<TextOrNumber>::deserialize(d)?
        .into_iter()
        .map(|v| match v {
            TextOrNumber::Text(s) => s,
            TextOrNumber::Int(i) => format!("{i}.0"),
            TextOrNumber::Float(f) => format!("{f:?}"),
        })
        .collect())
}

fn text_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum TextOrNumber {
        Text(String),
        Int(i64),
        Float(f64),
    }
    Ok(match TextOrNumber::deserialize(d)? {
        TextOrNumber::Text(s) => s,
        TextOrNumber::Int(i) => format!("{i}.0"),
        TextOrNumber::Float(f) => format!("{f:?}"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: String,
    #[serde(default)]
    pub expected_checksum: Option<String>,
    #[serde(default = "default_source_id")]
    pub source_id: String,
    #[serde(default)]
    pub access_date: Option<NaiveDate>,
    #[serde(default = "default_independence_unit")]
    pub independence_unit: String,
    /// Row count stated by the dataset card, if it differs from the viewer.
    #[serde(default)]
    pub card_row_count: Option<usize>,
    #[serde(default)]
    pub viewer_row_count: Option<usize>,
}

fn default_source_id() -> String {
    "unspecified".into()
}

fn default_independence_unit() -> String {
    "item".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsConfig {
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub models: Vec<String>,
    pub rubrics: Vec<String>,
    #[serde(deserialize_with = "text_or_numbers")]
    pub temperatures: Vec<String>,
    pub primary_rubric: String,
    #[serde(deserialize_with = "text_or_number")]
    pub primary_temperature: String,
}

impl GridConfig {
    pub fn declared(&self) -> DeclaredGrid {
        DeclaredGrid::factorial(self.models.clone(), &self.rubrics, &self.temperatures)
    }

    pub fn primary(&self) -> InferencePolicy {
        InferencePolicy::new(self.primary_rubric.clone(), self.primary_temperature.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResampleConfig {
    pub bootstrap: usize,
    pub signflip: usize,
    pub permutation: usize,
    pub confidence: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            bootstrap: 2000,
            signflip: 100_000,
            permutation: 10_000,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestConfig {
    pub alpha: f64,
    pub fdr_q: f64,
    pub power: f64,
    pub mde_discordant_rates: Vec<f64>,
    pub kappa_weighting: KappaWeighting,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            alpha: 0.05,
            fdr_q: 0.05,
            power: 0.80,
            mde_discordant_rates: vec![0.20, 0.25, 0.30],
            kappa_weighting: KappaWeighting::Quadratic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LomoConfig {
    pub subsets: Vec<MetricSubset>,
    pub aggregators: Vec<Aggregator>,
}

impl Default for LomoConfig {
    fn default() -> Self {
        LomoConfig {
            subsets: default_lomo_subsets(),
            aggregators: DEFAULT_LOMO_AGGREGATORS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgreementConfig {
    pub enabled: bool,
    /// Defaults to the primary temperature.
    pub temperature: Option<String>,
    /// Rubric pair for the gold-stratified swap table; defaults to the first
    /// two declared rubrics.
    pub stratify: Option<(String, String)>,
}

impl Default for AgreementConfig {
    fn default() -> Self {
        AgreementConfig {
            enabled: true,
            temperature: None,
            stratify: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub enabled: bool,
    pub replicates: usize,
    pub bootstrap_replicates: usize,
    pub base_accuracy: f64,
    pub cells: Vec<SimCell>,
    pub triples: Vec<ThresholdTriple>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let base = SweepConfig::default();
        SweepSection {
            enabled: false,
            replicates: base.replicates,
            bootstrap_replicates: base.bootstrap_replicates,
            base_accuracy: base.base_accuracy,
            cells: default_cells(),
            triples: default_triples(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Text,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Json => "audit_report.json",
            ReportFormat::Text => "audit_report.txt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<String>,
    pub formats: Vec<ReportFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            formats: vec![ReportFormat::Json, ReportFormat::Text],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub predictions: PredictionsConfig,
    pub grid: GridConfig,
    pub thresholds: ThresholdTriple,
    #[serde(default)]
    pub resample: ResampleConfig,
    #[serde(default)]
    pub tests: TestConfig,
    #[serde(default)]
    pub lomo: LomoConfig,
    #[serde(default)]
    pub agreement: AgreementConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputConfig,
    /// Externally reported headroom per metric, compared against the
    /// computed values.
    #[serde(default)]
    pub reference_headroom: BTreeMap<MetricId, f64>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, AuditError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AuditError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a configuration file; relative data paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, AuditError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AuditError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| -> String {
            let pb = Path::new(p);
            if pb.is_absolute() {
                p.to_string()
            } else {
                base.join(pb).display().to_string()
            }
        };
        cfg.dataset.path = resolve(&cfg.dataset.path);
        cfg.predictions.path = resolve(&cfg.predictions.path);
        if let Some(dir) = &cfg.output.dir {
            cfg.output.dir = Some(resolve(dir));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        let bad = |m: String| Err(AuditError::Config(m));
        let r = &self.resample;
        for (name, b) in [
            ("bootstrap", r.bootstrap),
            ("signflip", r.signflip),
            ("permutation", r.permutation),
        ] {
            if b == 0 {
                return bad(format!("resample.{name} must be at least 1"));
            }
        }
        if !(r.confidence > 0.0 && r.confidence < 1.0) {
            return bad(format!("resample.confidence {} must lie in (0, 1)", r.confidence));
        }
        let g = &self.grid;
        if g.models.is_empty() || g.rubrics.is_empty() || g.temperatures.is_empty() {
            return bad("grid needs at least one model, rubric and temperature".into());
        }
        if !g.rubrics.contains(&g.primary_rubric) || !g.temperatures.contains(&g.primary_temperature) {
            return bad(format!("primary policy {} is not in the declared grid", g.primary()));
        }
        self.thresholds
            .validate()
            .map_err(|e| AuditError::Config(e.to_string()))?;
        let t = &self.tests;
        for (name, v) in [("alpha", t.alpha), ("fdr_q", t.fdr_q), ("power", t.power)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("tests.{name} {v} must lie in (0, 1)"));
            }
        }
        if let Some(s) = self.lomo.subsets.iter().find(|s| s.metrics.is_empty()) {
            return bad(format!("lomo subset `{}` is empty", s.label));
        }
        if self.lomo.aggregators.is_empty() {
            return bad("lomo.aggregators is empty".into());
        }
        if let Some(t) = &self.agreement.temperature {
            if !g.temperatures.contains(t) {
                return bad(format!("agreement temperature {t} is not declared"));
            }
        }
        if let Some((a, b)) = &self.agreement.stratify {
            if !g.rubrics.contains(a) || !g.rubrics.contains(b) || a == b {
                return bad(format!("stratify pair ({a}, {b}) must be two declared rubrics"));
            }
        }
        if self.sweep.enabled {
            if self.sweep.replicates == 0 || self.sweep.bootstrap_replicates == 0 {
                return bad("sweep replicate counts must be at least 1".into());
            }
            if self.sweep.cells.is_empty() || self.sweep.triples.is_empty() {
                return bad("sweep needs at least one cell and one triple".into());
            }
        }
        Ok(())
    }

    fn bootstrap_plan(&self) -> ResamplePlan {
        ResamplePlan::bootstrap(self.resample.bootstrap, self.seed).with_confidence(self.resample.confidence)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub manifest: DatasetManifest,
    pub card_row_count: Option<usize>,
    pub viewer_row_count: Option<usize>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: Label,
    pub count: usize,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub metric: MetricId,
    pub majority_score: f64,
    pub headroom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdeRow {
    pub discordant_rate: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineBlock {
    pub majority_label: Label,
    pub metrics: Vec<BaselineRow>,
    /// Wilson interval of the majority-label accuracy.
    pub majority_accuracy_interval: IntervalEstimate,
    pub mde: Vec<MdeRow>,
    pub chance_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityBlock {
    pub thresholds: ThresholdTriple,
    pub primary_policy: InferencePolicy,
    pub rows: Vec<DiagnosticRow>,
    pub pass_set: Vec<MetricId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScoreRow {
    pub model: String,
    pub metric: MetricId,
    pub identifiable: bool,
    pub interval: IntervalEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wilson: Option<IntervalEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRow {
    pub model_a: String,
    pub model_b: String,
    pub delta: f64,
    pub ci: IntervalEstimate,
    pub p: f64,
    pub raw_reject: bool,
    pub holm_reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionCell {
    pub model_a: String,
    pub model_b: String,
    pub rubric: String,
    pub temperature: Temperature,
    pub delta: f64,
    pub p: f64,
    pub raw_reject: bool,
    pub holm_reject: bool,
    pub bh_reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionGrid {
    pub cells: Vec<InversionCell>,
    pub family_size: usize,
    pub alpha: f64,
    pub fdr_q: f64,
    pub holm_first_threshold: f64,
    pub raw_rejections: usize,
    pub holm_rejections: usize,
    pub bh_rejections: usize,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingBlock {
    pub label: String,
    pub metrics: Vec<MetricId>,
    pub outcomes: Vec<AggregateOutcome>,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionRow {
    pub subset: String,
    pub dimension: Dimension,
    pub mean_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondorcetBlock {
    pub subset: String,
    pub result: CondorcetResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedSwaps {
    pub rubric_a: String,
    pub rubric_b: String,
    pub strata: Vec<SwapStratum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementBlock {
    pub temperature: Temperature,
    pub rows: Vec<AgreementRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratified: Option<StratifiedSwaps>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub metric: MetricId,
    pub model: String,
    pub min: f64,
    pub max: f64,
    pub n_policies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimScope {
    pub supported: Vec<String>,
    pub not_supported: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub provenance: Provenance,
    pub class_distribution: Vec<ClassRow>,
    pub baselines: BaselineBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementBlock>,
    pub identifiability: IdentifiabilityBlock,
    pub model_scores: Vec<ModelScoreRow>,
    pub pairwise: Vec<PairwiseRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_ranking: Option<RankingBlock>,
    pub diagnostic_rankings: Vec<LomoRow>,
    pub inversions: InversionGrid,
    pub dimension_sensitivity: Vec<DimensionRow>,
    pub condorcet: Vec<CondorcetBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation_t: Option<PermutationT>,
    pub score_ranges: Vec<ScoreRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<Vec<SimOutcome>>,
    pub claim_scope: ClaimScope,
    pub methods_notes: Vec<String>,
}

/// Sign-flip tests for every unordered model pair (in declared order) under
/// every policy, with Holm and BH over the whole family.
pub fn run_inversion_grid(
    grid: &PredictionGrid,
    dataset: &Dataset,
    plan: &ResamplePlan,
    alpha: f64,
    fdr_q: f64,
) -> Result<InversionGrid, AuditError> {
    let models = grid.models();
    let mut cells = Vec::new();
    let mut p_values = Vec::new();
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            for policy in grid.policies() {
                let ca = grid.correctness_vector(a, policy, dataset)?;
                let cb = grid.correctness_vector(b, policy, dataset)?;
                let d: Vec<i8> = ca.iter().zip(&cb).map(|(&x, &y)| x as i8 - y as i8).collect();
                let cell_plan = plan.clone().with_stream(SIGNFLIP_STREAM_BASE + cells.len() as u64);
                let test = signflip_randomization(&d, &cell_plan)?;
                let delta = d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64;
                p_values.push(test.p_two_sided);
                cells.push(InversionCell {
                    model_a: a.clone(),
                    model_b: b.clone(),
                    rubric: policy.rubric.clone(),
                    temperature: policy.temperature.clone(),
                    delta,
                    p: test.p_two_sided,
                    raw_reject: test.p_two_sided < alpha,
                    holm_reject: false,
                    bh_reject: false,
                });
            }
        }
    }
    let holm = holm_correction(&p_values, alpha)?;
    let bh = bh_fdr(&p_values, fdr_q)?;
    for (k, cell) in cells.iter_mut().enumerate() {
        cell.holm_reject = holm.reject[k];
        cell.bh_reject = bh[k];
    }
    let m = cells.len();
    Ok(InversionGrid {
        raw_rejections: cells.iter().filter(|c| c.raw_reject).count(),
        holm_rejections: holm.rejections(),
        bh_rejections: bh.iter().filter(|&&r| r).count(),
        family_size: m,
        alpha,
        fdr_q,
        holm_first_threshold: alpha / m as f64,
        cells,
        replicates: plan.replicates,
    })
}

const STAGES: [&str; 12] = [
    "manifest",
    "class distribution",
    "baselines",
    "agreement",
    "identifiability",
    "model scores",
    "rankings",
    "inversion grid",
    "dimension sensitivity",
    "condorcet",
    "threshold sweep",
    "report assembly",
];

struct Tracker {
    completed: Vec<String>,
}

impl Tracker {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T, AuditError>) -> Result<T, AuditFailure> {
        debug_assert!(STAGES.contains(&stage));
        match f() {
            Ok(v) => {
                self.completed.push(stage.to_string());
                Ok(v)
            }
            Err(error) => Err(AuditFailure {
                stage: stage.to_string(),
                completed: self.completed.clone(),
                error,
            }),
        }
    }
}

/// Loads the dataset and prediction grid named by `config`.
pub fn load_inputs(config: &RunConfig) -> Result<(Dataset, PredictionGrid), AuditError> {
    config.validate()?;
    let (dataset, _) = load_dataset(Path::new(&config.dataset.path))?;
    if let Some(expected) = &config.dataset.expected_checksum {
        check_expected_checksum(expected, &crate::corpus::checksum(&dataset))?;
    }
    let grid = load_predictions(Path::new(&config.predictions.path), &dataset, &config.grid.declared())?;
    Ok((dataset, grid))
}

/// Loads the dataset and predictions named by `config` and runs the audit.
pub fn run_audit(config: &RunConfig) -> Result<AuditReport, AuditFailure> {
    let mut tracker = Tracker { completed: vec![] };
    let (dataset, grid) = tracker.run("manifest", || load_inputs(config))?;
    tracker.completed.clear();
    run_audit_on(config, &dataset, &grid)
}

/// Runs the audit on already-loaded inputs.
pub fn run_audit_on(config: &RunConfig, dataset: &Dataset, grid: &PredictionGrid) -> Result<AuditReport, AuditFailure> {
    let mut tracker = Tracker { completed: vec![] };
    let w = config.tests.kappa_weighting;
    let mut notes: Vec<String> = vec![
        "Per-policy score ties award half a win to each model.".into(),
        "Headroom uses a theoretical ceiling of 1.0 for every metric, including weighted kappa.".into(),
        format!("Weighted kappa uses {} weights.", match w {
            KappaWeighting::Quadratic => "quadratic",
            KappaWeighting::Linear => "linear",
        }),
        "Bootstrap intervals are percentile intervals from a clustered item bootstrap; every model, policy and metric in a replicate shares one index multiset.".into(),
        "Spread is the range of per-model point scores on the primary cell.".into(),
    ];

    let manifest = tracker.run("manifest", || {
        config.validate()?;
        let date = config
            .dataset
            .access_date
            .unwrap_or(NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date"));
        if config.dataset.access_date.is_none() {
            notes.push("No access date configured; the manifest records 1970-01-01.".into());
        }
        let mut manifest = compute_manifest(dataset, &config.dataset.source_id, date);
        manifest.independence_unit = config.dataset.independence_unit.clone();
        if let Some(expected) = &config.dataset.expected_checksum {
            check_expected_checksum(expected, &manifest.checksum)?;
        }
        if grid.n_items() != dataset.n() {
            return Err(AuditError::Config(format!(
                "grid covers {} items, dataset has {}",
                grid.n_items(),
                dataset.n()
            )));
        }
        match (config.dataset.card_row_count, config.dataset.viewer_row_count) {
            (Some(card), Some(viewer)) if card != viewer => notes.push(format!(
                "Dataset card states {card} rows while the viewer shows {viewer}; the audit uses the {} rows actually loaded.",
                dataset.n()
            )),
            _ => {}
        }
        Ok(manifest)
    })?;

    let gold = dataset.gold();
    let distribution = ClassDistribution::from_labels(&gold);
    let class_distribution = tracker.run("class distribution", || {
        Ok(Label::ALL
            .iter()
            .map(|&label| ClassRow {
                label,
                count: distribution.count(label),
                proportion: distribution.count(label) as f64 / gold.len() as f64,
            })
            .collect::<Vec<_>>())
    })?;

    let baselines = tracker.run("baselines", || {
        let majority_label = modal_class(&gold).ok_or(MetricError::Empty)?;
        let metrics = MetricId::ALL
            .iter()
            .map(|&m| {
                let score = majority_baseline(m, &gold, w)?.value;
                Ok(BaselineRow {
                    metric: m,
                    majority_score: score,
                    headroom: 1.0 - score,
                })
            })
            .collect::<Result<Vec<_>, AuditError>>()?;
        let majority_accuracy_interval = binomial_interval(
            distribution.count(majority_label),
            gold.len(),
            config.resample.confidence,
            IntervalMethod::Wilson,
        )?;
        let mde = config
            .tests
            .mde_discordant_rates
            .iter()
            .map(|&d| {
                Ok(MdeRow {
                    discordant_rate: d,
                    delta: mcnemar_mde(gold.len(), d, config.tests.alpha, config.tests.power)?,
                })
            })
            .collect::<Result<Vec<_>, AuditError>>()?;
        let chance = chance_agreement(&distribution.proportions, &distribution.proportions)?;
        Ok(BaselineBlock {
            majority_label,
            metrics,
            majority_accuracy_interval,
            mde,
            chance_agreement: chance,
        })
    })?;

    let plan = config.bootstrap_plan();
    let agreement = tracker.run("agreement", || {
        if !config.agreement.enabled {
            return Ok(None);
        }
        let temperature = Temperature::new(
            config
                .agreement
                .temperature
                .clone()
                .unwrap_or_else(|| config.grid.primary_temperature.clone()),
        );
        let rows = agreement_table(grid, &temperature, &plan)?;
        let pair = config.agreement.stratify.clone().or_else(|| {
            let r = &config.grid.rubrics;
            (r.len() >= 2).then(|| (r[0].clone(), r[1].clone()))
        });
        let stratified = match pair {
            Some((a, b)) => {
                let strata = swap_stratification(grid, &a, &b, &temperature, dataset, &plan)?;
                Some(StratifiedSwaps {
                    rubric_a: a,
                    rubric_b: b,
                    strata,
                })
            }
            None => None,
        };
        Ok(Some(AgreementBlock {
            temperature,
            rows,
            stratified,
        }))
    })?;
    if let Some(block) = &agreement {
        if block.rows.iter().any(|r| r.dominant_swap.as_ref().is_some_and(|s| s.tied)) {
            notes.push("Some dominant swaps were tied; the transition with the smaller source label is shown.".into());
        }
        if let Some(s) = &block.stratified {
            if s.strata.iter().any(|x| !x.interpretable) {
                notes.push(
                    "Swap strata with fewer than 5 gold items are marked not interpretable.".into(),
                );
            }
        }
    }

    let primary = config.grid.primary();
    let (identifiability, noise) = tracker.run("identifiability", || {
        let noise = noise_estimates(grid, dataset, &primary, &MetricId::ALL, &plan, w)?;
        let mut rows = Vec::new();
        let mut block_notes = Vec::new();
        for ne in &noise {
            let d = Diagnostics {
                metric: ne.metric,
                headroom: headroom(ne.metric, &gold, w)?,
                support: effective_support(ne.metric, &gold),
                se: ne.se,
                spread: ne.spread,
                snr: ne.snr,
                note: ne.note.clone(),
            };
            if let Some(&reported) = config.reference_headroom.get(&ne.metric) {
                if (reported - d.headroom).abs() > REFERENCE_TOLERANCE {
                    block_notes.push(format!(
                        "{}: reference headroom {reported:.3} differs from the computed {:.3} (majority label {}); the computed value is used.",
                        ne.metric, d.headroom, baselines.majority_label
                    ));
                }
            }
            rows.push(evaluate_rule(&d, &config.thresholds));
        }
        let passing = pass_set(&rows);
        Ok((
            IdentifiabilityBlock {
                thresholds: config.thresholds,
                primary_policy: primary.clone(),
                rows,
                pass_set: passing,
                notes: block_notes,
            },
            noise,
        ))
    })?;
    let passing = identifiability.pass_set.clone();

    let (model_scores, pairwise) = tracker.run("model scores", || {
        let cells: Vec<&[Label]> = grid
            .models()
            .iter()
            .map(|m| grid.cell_labels(m, &primary))
            .collect::<Result<_, _>>()?;
        let k = MetricId::ALL.len();
        let boot = clustered_bootstrap(
            |idx: &[usize]| -> Result<Vec<f64>, AuditError> {
                let mut out = Vec::with_capacity(cells.len() * k);
                for pred in &cells {
                    let c = Confusion::from_indices(pred, &gold, idx);
                    for m in MetricId::ALL {
                        out.push(c.score(m, w)?.value);
                    }
                }
                Ok(out)
            },
            gold.len(),
            &plan,
        )?;
        let mut rows = Vec::new();
        for (mi, model) in grid.models().iter().enumerate() {
            for (j, metric) in MetricId::ALL.into_iter().enumerate() {
                let wilson = if metric == MetricId::A1 {
                    let hits = cells[mi].iter().zip(&gold).filter(|(a, b)| a == b).count();
                    Some(binomial_interval(hits, gold.len(), plan.confidence, IntervalMethod::Wilson)?)
                } else {
                    None
                };
                rows.push(ModelScoreRow {
                    model: model.clone(),
                    metric,
                    identifiable: passing.contains(&metric),
                    interval: boot.interval(mi * k + j),
                    wilson,
                });
            }
        }
        debug_assert!(noise.iter().all(|ne| ne.model_scores.len() == cells.len()));
        let mut pairs = Vec::new();
        let mut p = Vec::new();
        let models = grid.models();
        for (i, a) in models.iter().enumerate() {
            for b in &models[i + 1..] {
                let ca = grid.correctness_vector(a, &primary, dataset)?;
                let cb = grid.correctness_vector(b, &primary, dataset)?;
                let res = paired_delta_test(&ca, &cb, &plan)?;
                p.push(res.test.p_two_sided);
                pairs.push(PairwiseRow {
                    model_a: a.clone(),
                    model_b: b.clone(),
                    delta: res.delta,
                    ci: res.ci,
                    p: res.test.p_two_sided,
                    raw_reject: res.test.p_two_sided < config.tests.alpha,
                    holm_reject: false,
                });
            }
        }
        if !p.is_empty() {
            let holm = holm_correction(&p, config.tests.alpha)?;
            for (row, r) in pairs.iter_mut().zip(holm.reject) {
                row.holm_reject = r;
            }
        }
        Ok((rows, pairs))
    })?;

    let table = ScoreTable::from_grid(grid, dataset, &MetricId::ALL, w).map_err(|e| AuditFailure {
        stage: "rankings".into(),
        completed: tracker.completed.clone(),
        error: e.into(),
    })?;
    let (primary_ranking, diagnostic_rankings) = tracker.run("rankings", || {
        let primary_ranking = if passing.is_empty() {
            None
        } else {
            let outcomes = Aggregator::ALL
                .iter()
                .map(|&a| aggregate(a, &table, &passing))
                .collect::<Result<Vec<_>, _>>()?;
            let first = &outcomes[0].ranking;
            let agree = first.is_strict() && outcomes.iter().all(|o| &o.ranking == first);
            Some(RankingBlock {
                label: "primary ranking (identifiable metrics only)".into(),
                metrics: passing.clone(),
                outcomes,
                agree,
            })
        };
        let lomo = lomo_decomposition(&table, &config.lomo.subsets, &config.lomo.aggregators)?;
        Ok((primary_ranking, lomo))
    })?;
    if primary_ranking.is_none() {
        notes.push("No metric passed the identifiability rule; no primary ranking is reported.".into());
    }
    let degenerate = primary_ranking
        .iter()
        .flat_map(|b| b.outcomes.iter())
        .chain(diagnostic_rankings.iter().flat_map(|r| r.outcomes.iter()))
        .any(|o| o.note.is_some());
    if degenerate {
        notes.push(
            "Some win matrices have no finite Bradley–Terry MLE; those rankings order the components of the comparison graph and fit within each.".into(),
        );
    }

    let inversions = tracker.run("inversion grid", || {
        run_inversion_grid(
            grid,
            dataset,
            &ResamplePlan::signflip(config.resample.signflip, config.seed),
            config.tests.alpha,
            config.tests.fdr_q,
        )
    })?;

    let primary_subset: Vec<MetricId> = if passing.is_empty() {
        MetricId::ALL.to_vec()
    } else {
        passing.clone()
    };
    let dimension_rows = tracker.run("dimension sensitivity", || {
        let mut rows = Vec::new();
        for (label, subset) in [("primary", primary_subset.as_slice()), ("full", &MetricId::ALL[..])] {
            let rankings = per_policy_rankings(&table, subset)?;
            for dim in Dimension::ALL {
                let mean_distance = match dimension_sensitivity(&rankings, dim) {
                    Ok(v) => Some(v),
                    Err(RankError::NoEligiblePairs(_)) => None,
                    Err(e) => return Err(e.into()),
                };
                rows.push(DimensionRow {
                    subset: label.into(),
                    dimension: dim,
                    mean_distance,
                });
            }
        }
        Ok(rows)
    })?;

    let (condorcet_blocks, perm) = tracker.run("condorcet", || {
        let mut blocks = Vec::new();
        for (label, subset) in [("primary", primary_subset.as_slice()), ("full", &MetricId::ALL[..])] {
            let w = crate::rank::win_matrix(&table, subset)?;
            blocks.push(CondorcetBlock {
                subset: label.into(),
                result: condorcet(&w),
            });
        }
        let perm = if grid.models().len() >= 2 {
            let outcomes = PairwiseOutcomes::from_table(&table, &primary_subset)?;
            Some(permutation_t(
                &outcomes,
                &ResamplePlan::permutation(config.resample.permutation, config.seed),
            )?)
        } else {
            None
        };
        Ok((blocks, perm))
    })?;
    if perm.is_some() {
        notes.push(
            "Permutation test of T: each null replicate swaps the two models of every pair independently per scoring policy with probability 1/2, then refits the Bradley–Terry reference ranking before measuring inversion rates.".into(),
        );
    }

    let simulation = tracker.run("threshold sweep", || {
        if !config.sweep.enabled {
            return Ok(None);
        }
        let sweep_cfg = SweepConfig {
            replicates: config.sweep.replicates,
            bootstrap_replicates: config.sweep.bootstrap_replicates,
            seed: config.seed,
            base_accuracy: config.sweep.base_accuracy,
        };
        Ok(Some(threshold_sweep(&config.sweep.cells, &config.sweep.triples, &sweep_cfg)?))
    })?;
    if simulation.is_some() {
        notes.push(format!(
            "Threshold sweep generator: adjacent-class errors reflected at the scale ends; Gini = half the mean absolute pairwise difference of class proportions over the mean proportion; top model accuracy {}.",
            config.sweep.base_accuracy
        ));
    }

    let report = tracker.run("report assembly", || {
        let mut score_ranges = Vec::new();
        for metric in MetricId::ALL {
            for (mi, model) in table.models().iter().enumerate() {
                let vals: Vec<f64> = (0..table.policies().len())
                    .filter_map(|p| table.get(mi, p, metric))
                    .collect();
                score_ranges.push(ScoreRange {
                    metric,
                    model: model.clone(),
                    min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
                    max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    n_policies: vals.len(),
                });
            }
        }
        notes.push(
            "Score ranges are per metric over the rubric × temperature cells, so each metric owns one slice of the full sweep.".into(),
        );
        let claim_scope = claim_scope(config, &manifest, &identifiability, primary_ranking.as_ref(), &inversions);
        Ok(AuditReport {
            provenance: Provenance {
                tool: TOOL_NAME.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                manifest,
                card_row_count: config.dataset.card_row_count,
                viewer_row_count: config.dataset.viewer_row_count,
                config: config.clone(),
            },
            class_distribution,
            baselines,
            agreement,
            identifiability,
            model_scores,
            pairwise,
            primary_ranking,
            diagnostic_rankings,
            inversions,
            dimension_sensitivity: dimension_rows,
            condorcet: condorcet_blocks,
            permutation_t: perm,
            score_ranges,
            simulation,
            claim_scope,
            methods_notes: std::mem::take(&mut notes),
        })
    })?;
    Ok(report)
}

fn metric_list(ms: &[MetricId]) -> String {
    ms.iter().map(MetricId::to_string).collect::<Vec<_>>().join(", ")
}

fn claim_scope(
    config: &RunConfig,
    manifest: &DatasetManifest,
    ident: &IdentifiabilityBlock,
    primary: Option<&RankingBlock>,
    inversions: &InversionGrid,
) -> ClaimScope {
    let failing: Vec<MetricId> = MetricId::ALL
        .into_iter()
        .filter(|m| !ident.pass_set.contains(m))
        .collect();
    let artifact = format!(
        "{} ({} rows, sha256 {}…)",
        manifest.source_id,
        manifest.row_count,
        &manifest.checksum[..12.min(manifest.checksum.len())]
    );
    let mut supported = vec![format!(
        "Scores and intervals for {} models on {artifact} under {} rubrics × {} temperatures.",
        config.grid.models.len(),
        config.grid.rubrics.len(),
        config.grid.temperatures.len()
    )];
    match primary {
        Some(b) => supported.push(format!(
            "Model ordering on identifiable metrics {{{}}}: {} (aggregators {}).",
            metric_list(&b.metrics),
            b.outcomes[0].ranking,
            if b.agree { "agree" } else { "disagree" }
        )),
        None => supported.push("Identifiability diagnostics for every metric; no metric supports a ranking.".into()),
    }
    supported.push(format!(
        "{} of {} pairwise inversion tests survive Holm at α = {}.",
        inversions.holm_rejections, inversions.family_size, inversions.alpha
    ));
    let mut not_supported = vec![
        format!("Comparisons on any artifact other than {artifact}; changing rows, checksum or parsing is a new measurement event."),
        "Rankings under rubrics, temperatures, models or aggregation rules outside the declared grid.".into(),
        "Differences smaller than the minimum detectable effect reported in the baseline block.".into(),
    ];
    if !failing.is_empty() {
        not_supported.push(format!(
            "Primary ranking evidence from metrics failing identifiability: {}.",
            metric_list(&failing)
        ));
    }
    ClaimScope {
        supported,
        not_supported,
    }
}

pub fn render_json(report: &AuditReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_report(text: &str) -> Result<AuditReport, AuditError> {
    serde_json::from_str(text).map_err(|e| AuditError::Report(e.to_string()))
}

fn fmt_snr(x: f64) -> String {
    if x.is_infinite() {
        "∞".into()
    } else {
        format!("{x:.1}")
    }
}

fn ci(i: &IntervalEstimate) -> String {
    format!("{:.3} [{:.3}, {:.3}]", i.point, i.lower, i.upper)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Fixed-width table of threshold-sweep outcomes.
pub fn render_sweep_text(sim: &[SimOutcome]) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "gini  rarest  h     θ_H    θ_E  θ_SNR  A1    A2    A3    A4    A5    partition top1");
    for s in sim {
        let rates: Vec<String> = s.per_metric_pass_rate.iter().map(|x| format!("{x:.2}")).collect();
        let _ = writeln!(
            o,
            "{:<5} {:<7} {:<5} {:<6} {:<4} {:<6} {}  {:.2}      {:.2}",
            s.cell.gini,
            s.cell.rarest_count,
            s.cell.cohens_h,
            s.triple.headroom,
            s.triple.support,
            s.triple.snr,
            rates.join("  "),
            s.partition_match,
            s.top1_recovery
        );
    }
    o
}

/// Plain-text rendering of every table; absent optional sections are
/// omitted.
pub fn render_text(r: &AuditReport) -> String {
    let mut o = String::new();
    let p = &r.provenance;
    let _ = writeln!(o, "{} {} audit report", p.tool, p.version);
    let _ = writeln!(o, "\n== Provenance");
    let _ = writeln!(o, "source       {}", p.manifest.source_id);
    let _ = writeln!(o, "access date  {}", p.manifest.access_date);
    let _ = writeln!(o, "rows         {}", p.manifest.row_count);
    let _ = writeln!(o, "sha256       {}", p.manifest.checksum);
    let _ = writeln!(o, "unit         {}", p.manifest.independence_unit);
    if let (Some(c), Some(v)) = (p.card_row_count, p.viewer_row_count) {
        let _ = writeln!(o, "card rows    {c} (viewer {v})");
    }
    let _ = writeln!(o, "seed         {}", p.config.seed);
    let _ = writeln!(o, "thresholds   {}", p.config.thresholds);

    let _ = writeln!(o, "\n== Class distribution");
    let _ = writeln!(o, "{:<6} {:>6} {:>7}", "label", "n", "%");
    for c in &r.class_distribution {
        let _ = writeln!(o, "{:<6} {:>6} {:>7.1}", c.label.to_string(), c.count, 100.0 * c.proportion);
    }

    let b = &r.baselines;
    let _ = writeln!(o, "\n== Baselines (majority label {})", b.majority_label);
    let _ = writeln!(o, "{:<6} {:>9} {:>9}", "metric", "baseline", "headroom");
    for m in &b.metrics {
        let _ = writeln!(o, "{:<6} {:>9.3} {:>9.3}", m.metric.to_string(), m.majority_score, m.headroom);
    }
    let _ = writeln!(o, "majority accuracy Wilson {}", ci(&b.majority_accuracy_interval));
    for m in &b.mde {
        let _ = writeln!(o, "McNemar MDE at discordant rate {:.2}: {:.3}", m.discordant_rate, m.delta);
    }
    let _ = writeln!(o, "chance agreement under independence: {:.3}", b.chance_agreement);

    if let Some(a) = &r.agreement {
        let _ = writeln!(o, "\n== Rubric agreement (temperature {})", a.temperature);
        let _ = writeln!(o, "{:<16} {:<10} {:>22} dominant swap", "model", "rubrics", "agree");
        for row in &a.rows {
            let swap = match &row.dominant_swap {
                Some(s) => format!("{} → {} on {} items{}", s.from, s.to, s.count, if s.tied { " (tied)" } else { "" }),
                None => "none".into(),
            };
            let _ = writeln!(
                o,
                "{:<16} {:<10} {:>22} {swap}",
                row.model,
                format!("{}/{}", row.rubric_a, row.rubric_b),
                ci(&row.ci)
            );
        }
        if let Some(s) = &a.stratified {
            let _ = writeln!(o, "\n== Swap rates by gold label ({} vs {}, pooled over models)", s.rubric_a, s.rubric_b);
            let _ = writeln!(o, "{:<6} {:>7} {:>6} {:>22}", "gold", "pairs", "swaps", "rate");
            for st in &s.strata {
                let _ = writeln!(
                    o,
                    "{:<6} {:>7} {:>6} {:>22}{}",
                    st.gold.to_string(),
                    st.n_pairs,
                    st.swaps,
                    ci(&st.ci),
                    if st.interpretable { "" } else { "  not interpretable" }
                );
            }
        }
    }

    let id = &r.identifiability;
    let _ = writeln!(o, "\n== Identifiability (primary policy {}; {})", id.primary_policy, id.thresholds);
    let _ = writeln!(o, "{:<6} {:>6} {:>5} {:>6} {:>7} {:>6}  pass", "metric", "H", "E", "SE", "spread", "SNR");
    for row in &id.rows {
        let d = &row.diagnostics;
        let _ = writeln!(
            o,
            "{:<6} {:>6.3} {:>5} {:>6.3} {:>7.3} {:>6}  {}",
            d.metric.to_string(),
            d.headroom,
            d.support,
            d.se,
            d.spread,
            fmt_snr(d.snr),
            row.mark()
        );
    }
    for n in &id.notes {
        let _ = writeln!(o, "note: {n}");
    }

    let _ = writeln!(o, "\n== Per-model scores on the primary cell");
    for row in &r.model_scores {
        let wilson = row.wilson.as_ref().map(|w| format!("  Wilson [{:.3}, {:.3}]", w.lower, w.upper)).unwrap_or_default();
        let _ = writeln!(
            o,
            "{:<16} {:<3} {}{}{}",
            row.model,
            row.metric.to_string(),
            ci(&row.interval),
            wilson,
            if row.identifiable { "" } else { "  (diagnostic)" }
        );
    }
    if !r.pairwise.is_empty() {
        let _ = writeln!(o, "\n== Pairwise accuracy differences (primary cell)");
        for row in &r.pairwise {
            let _ = writeln!(
                o,
                "{} − {}: {}  p = {:.4}  raw {}  Holm {}",
                row.model_a,
                row.model_b,
                ci(&row.ci),
                row.p,
                yes_no(row.raw_reject),
                yes_no(row.holm_reject)
            );
        }
    }

    if let Some(pr) = &r.primary_ranking {
        let _ = writeln!(o, "\n== {} on {{{}}}", pr.label, metric_list(&pr.metrics));
        for out in &pr.outcomes {
            let _ = writeln!(o, "{:<9} {}", out.aggregator.short(), out.ranking);
            if let Some(n) = &out.note {
                let _ = writeln!(o, "          note: {n}");
            }
        }
        let _ = writeln!(o, "aggregators agree: {}", yes_no(pr.agree));
    }
    let _ = writeln!(o, "\n== Diagnostic rankings by metric subset");
    for row in &r.diagnostic_rankings {
        let rankings: Vec<String> = row
            .outcomes
            .iter()
            .map(|x| format!("{} {}", x.aggregator.short(), x.ranking))
            .collect();
        let _ = writeln!(o, "{:<9} {} | agree: {}", row.subset.label, rankings.join(" | "), yes_no(row.agree));
    }

    let inv = &r.inversions;
    let _ = writeln!(
        o,
        "\n== Inversion grid ({} tests, B = {}, Holm first threshold {:.2e})",
        inv.family_size, inv.replicates, inv.holm_first_threshold
    );
    let _ = writeln!(
        o,
        "raw rejections {}  Holm {}  BH {}",
        inv.raw_rejections, inv.holm_rejections, inv.bh_rejections
    );
    for c in &inv.cells {
        let _ = writeln!(
            o,
            "{} vs {} {}@{}: Δ = {:+.3}  p = {:.5}{}{}",
            c.model_a,
            c.model_b,
            c.rubric,
            c.temperature,
            c.delta,
            c.p,
            if c.holm_reject { "  Holm" } else { "" },
            if c.bh_reject { "  BH" } else { "" }
        );
    }

    let _ = writeln!(o, "\n== Dimension sensitivity (mean Kendall distance)");
    for d in &r.dimension_sensitivity {
        let v = d.mean_distance.map_or("n/a".into(), |x| format!("{x:.3}"));
        let _ = writeln!(o, "{:<8} {:<12} {v}", d.subset, d.dimension.to_string());
    }

    let _ = writeln!(o, "\n== Condorcet");
    for c in &r.condorcet {
        let _ = writeln!(
            o,
            "{:<8} winner {}  cycles {}",
            c.subset,
            c.result.winner.as_deref().unwrap_or("none"),
            c.result.cycles.len()
        );
        for cy in &c.result.cycles {
            let _ = writeln!(o, "         {} > {} > {} > {}", cy[0], cy[1], cy[2], cy[0]);
        }
    }
    if let Some(t) = &r.permutation_t {
        let _ = writeln!(
            o,
            "T = {:.3}; null mean {:.3}, 95% [{:.3}, {:.3}]; p = {:.4} ({} tail, B = {})",
            t.t_observed,
            t.null_mean,
            t.null_q025,
            t.null_q975,
            t.p_two_sided,
            match t.tail {
                crate::rank::Tail::Lower => "lower",
                crate::rank::Tail::Upper => "upper",
            },
            t.replicates
        );
    }

    let _ = writeln!(o, "\n== Score ranges over policies");
    for s in &r.score_ranges {
        let _ = writeln!(o, "{:<3} {:<16} [{:.3}, {:.3}] over {}", s.metric.to_string(), s.model, s.min, s.max, s.n_policies);
    }

    if let Some(sim) = &r.simulation {
        let _ = writeln!(o, "\n== Threshold sweep");
        o.push_str(&render_sweep_text(sim));
    }

    let _ = writeln!(o, "\n== Claim scope");
    let _ = writeln!(o, "Supported:");
    for s in &r.claim_scope.supported {
        let _ = writeln!(o, "  + {s}");
    }
    let _ = writeln!(o, "Not supported:");
    for s in &r.claim_scope.not_supported {
        let _ = writeln!(o, "  - {s}");
    }

    let _ = writeln!(o, "\n== Methods notes");
    for n in &r.methods_notes {
        let _ = writeln!(o, "  * {n}");
    }
    o
}

/// Writes the report in each requested format into `dir`.
pub fn emit_report(report: &AuditReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, AuditError> {
    std::fs::create_dir_all(dir).map_err(|e| AuditError::Output {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let mut written = Vec::new();
    for &f in formats {
        let path = dir.join(f.file_name());
        let body = match f {
            ReportFormat::Json => render_json(report),
            ReportFormat::Text => render_text(report),
        };
        std::fs::write(&path, body).map_err(|e| AuditError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gold_from_counts, model_name, simulate_policy_grid};

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn config(models: usize, rubrics: &[&str], temps: &[&str]) -> RunConfig {
        RunConfig {
            seed: 42,
            dataset: DatasetConfig {
                path: "unused".into(),
                expected_checksum: None,
                source_id: "synthetic".into(),
                access_date: NaiveDate::from_ymd_opt(2026, 1, 1),
                independence_unit: "item".into(),
                card_row_count: None,
                viewer_row_count: None,
            },
            predictions: PredictionsConfig { path: "unused".into() },
            grid: GridConfig {
                models: (0..models).map(model_name).collect(),
                rubrics: strings(rubrics),
                temperatures: strings(temps),
                primary_rubric: rubrics[0].into(),
                primary_temperature: temps[0].into(),
            },
            thresholds: ThresholdTriple::default(),
            resample: ResampleConfig {
                bootstrap: 200,
                signflip: 2000,
                permutation: 200,
                confidence: 0.95,
            },
            tests: TestConfig::default(),
            lomo: LomoConfig::default(),
            agreement: AgreementConfig::default(),
            sweep: SweepSection::default(),
            output: OutputConfig::default(),
            reference_headroom: BTreeMap::new(),
        }
    }

    fn fixture(h: f64) -> (RunConfig, Dataset, PredictionGrid) {
        let cfg = config(4, &["R1", "R2"], &["0.0", "0.7"]);
        let gold = gold_from_counts([2, 11, 72, 139, 29], 1);
        let dataset = Dataset::from_gold(&gold).unwrap();
        let grid = simulate_policy_grid(&gold, 0.62, h, 4, &cfg.grid.rubrics, &cfg.grid.temperatures, 3).unwrap();
        (cfg, dataset, grid)
    }

    #[test]
    fn toml_config_parses_with_numeric_temperatures() {
        let text = r#"
seed = 42
[dataset]
path = "data.jsonl"
[predictions]
path = "preds.jsonl"
[grid]
models = ["a", "b"]
rubrics = ["R1"]
temperatures = [0.0, 0.3, 0.7]
primary_rubric = "R1"
primary_temperature = 0.0
[thresholds]
headroom = 0.15
support = 50
snr = 1.0
[reference_headroom]
A3 = 0.090
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.grid.temperatures, strings(&["0.0", "0.3", "0.7"]));
        assert_eq!(cfg.grid.primary_temperature, "0.0");
        assert_eq!(cfg.reference_headroom[&MetricId::A3], 0.09);
        assert_eq!(cfg.resample.signflip, 100_000);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let mut cfg = config(2, &["R1"], &["0.0"]);
        cfg.grid.primary_rubric = "R9".into();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let mut cfg = config(2, &["R1"], &["0.0"]);
        cfg.resample.bootstrap = 0;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        assert!(RunConfig::from_toml_str("seed = 1").is_err());
    }

    #[test]
    fn inversion_grid_counts_and_identical_models() {
        let gold = gold_from_counts([2, 11, 72, 139, 29], 1);
        let dataset = Dataset::from_gold(&gold).unwrap();
        let rubrics = strings(&["R1", "R2", "R3", "R4", "R5"]);
        let temps = strings(&["0.0", "0.3", "0.7"]);
        let grid = simulate_policy_grid(&gold, 0.62, 0.1, 4, &rubrics, &temps, 2).unwrap();
        let inv = run_inversion_grid(&grid, &dataset, &ResamplePlan::signflip(500, 1), 0.05, 0.05).unwrap();
        assert_eq!(inv.family_size, 90);
        assert!((inv.holm_first_threshold - 0.05 / 90.0).abs() < 1e-15);

        // Duplicate one model's cells under another name.
        let cells: Vec<Vec<Label>> = ["sim-0", "sim-0"]
            .iter()
            .flat_map(|m| grid.policies().iter().map(|p| grid.cell_labels(m, p).unwrap().to_vec()).collect::<Vec<_>>())
            .collect();
        let declared = DeclaredGrid::factorial(strings(&["x", "y"]), &rubrics, &temps);
        let twin = PredictionGrid::from_cells(&declared, cells).unwrap();
        let inv = run_inversion_grid(&twin, &dataset, &ResamplePlan::signflip(500, 1), 0.05, 0.05).unwrap();
        assert!(inv.cells.iter().all(|c| c.p == 1.0));
        assert_eq!(inv.raw_rejections + inv.holm_rejections + inv.bh_rejections, 0);
    }

    #[test]
    fn audit_on_dominance_fixture() {
        let (cfg, dataset, grid) = fixture(0.3);
        let report = run_audit_on(&cfg, &dataset, &grid).unwrap();
        let primary = report.primary_ranking.as_ref().unwrap();
        assert!(primary.agree);
        assert!(primary.metrics.iter().all(|m| report.identifiability.pass_set.contains(m)));
        assert_eq!(report.condorcet[0].result.winner.as_deref(), Some("sim-0"));
        assert!(report.condorcet[0].result.cycles.is_empty());
        assert!(!report.claim_scope.supported.is_empty());
        assert!(!report.claim_scope.not_supported.is_empty());
        let text = render_text(&report);
        assert!(text.contains("✗ ("));
        assert!(!text.contains("== Threshold sweep"));
    }

    #[test]
    fn report_round_trips_and_is_deterministic() {
        let (cfg, dataset, grid) = fixture(0.2);
        let a = render_json(&run_audit_on(&cfg, &dataset, &grid).unwrap());
        let b = render_json(&run_audit_on(&cfg, &dataset, &grid).unwrap());
        assert_eq!(a, b);
        let parsed = parse_report(&a).unwrap();
        assert_eq!(render_json(&parsed), a);
    }

    #[test]
    fn disabling_agreement_leaves_other_tables() {
        let (mut cfg, dataset, grid) = fixture(0.2);
        let with = run_audit_on(&cfg, &dataset, &grid).unwrap();
        cfg.agreement.enabled = false;
        let without = run_audit_on(&cfg, &dataset, &grid).unwrap();
        assert!(without.agreement.is_none());
        assert_eq!(with.identifiability, without.identifiability);
        assert_eq!(with.inversions, without.inversions);
        assert_eq!(with.permutation_t, without.permutation_t);
    }

    #[test]
    fn checksum_mismatch_aborts_with_provenance_code() {
        let (mut cfg, dataset, grid) = fixture(0.2);
        cfg.dataset.expected_checksum = Some("00".repeat(32));
        let err = run_audit_on(&cfg, &dataset, &grid).unwrap_err();
        assert_eq!(err.stage, "manifest");
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("new measurement event"));
    }

    #[test]
    fn reference_headroom_note() {
        let (mut cfg, dataset, grid) = fixture(0.2);
        cfg.reference_headroom.insert(MetricId::A3, 0.090);
        let report = run_audit_on(&cfg, &dataset, &grid).unwrap();
        assert_eq!(report.identifiability.notes.len(), 1);
        assert!(report.identifiability.notes[0].contains("0.051"));
    }
}
