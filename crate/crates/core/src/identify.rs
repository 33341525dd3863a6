//! Identifiability diagnostics (headroom, effective support, noise, SNR),
//! the conjunction rule, and leave-one-metric-out re-aggregation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassDistribution, Dataset, Label};
use crate::grid::{GridError, InferencePolicy, MetricId, PredictionGrid};
use crate::metrics::{majority_baseline, Confusion, KappaWeighting, MetricError};
use crate::rank::{aggregate, AggregateOutcome, Aggregator, RankError, ScoreTable};
use crate::resample::{clustered_bootstrap, ResampleError, ResamplePlan};
use crate::stats::{float_or_inf, mean, std_dev};

#[derive(Debug, Error, PartialEq)]
pub enum IdentifyError {
    #[error("threshold {name} = {value} must be finite and non-negative")]
    InvalidThreshold { name: &'static str, value: f64 },
    #[error("metric subset is empty")]
    EmptySubset,
    #[error("no aggregators requested")]
    NoAggregators,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTriple {
    pub headroom: f64,
    pub support: usize,
    pub snr: f64,
}

impl ThresholdTriple {
    pub fn new(headroom: f64, support: usize, snr: f64) -> Result<Self, IdentifyError> {
        for (name, value) in [("headroom", headroom), ("snr", snr)] {
            if !value.is_finite() || value < 0.0 {
                return Err(IdentifyError::InvalidThreshold { name, value });
            }
        }
        Ok(ThresholdTriple {
            headroom,
            support,
            snr,
        })
    }

    pub fn validate(&self) -> Result<(), IdentifyError> {
        Self::new(self.headroom, self.support, self.snr).map(|_| ())
    }
}

impl Default for ThresholdTriple {
    fn default() -> Self {
        ThresholdTriple {
            headroom: 0.15,
            support: 50,
            snr: 1.0,
        }
    }
}

impl fmt::Display for ThresholdTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H ≥ {}, E ≥ {}, SNR ≥ {}", self.headroom, self.support, self.snr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Criterion {
    H,
    E,
    #[serde(rename = "SNR")]
    Snr,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::H => "H",
            Criterion::E => "E",
            Criterion::Snr => "SNR",
        })
    }
}

/// Raw diagnostics for one metric, before the rule is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub metric: MetricId,
    pub headroom: f64,
    pub support: usize,
    pub se: f64,
    pub spread: f64,
    #[serde(with = "float_or_inf")]
    pub snr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Diagnostics {
    /// Diagnostics from published or externally computed values; SNR is
    /// derived as spread / SE.
    pub fn from_values(metric: MetricId, headroom: f64, support: usize, se: f64, spread: f64) -> Self {
        let (snr, note) = signal_to_noise(spread, se);
        Diagnostics {
            metric,
            headroom,
            support,
            se,
            spread,
            snr,
            note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    #[serde(flatten)]
    pub diagnostics: Diagnostics,
    pub pass: bool,
    pub failed_criteria: Vec<Criterion>,
}

impl DiagnosticRow {
    pub fn metric(&self) -> MetricId {
        self.diagnostics.metric
    }

    /// Table mark: "✓" or "✗ (E, SNR)".
    pub fn mark(&self) -> String {
        if self.pass {
            "✓".into()
        } else {
            let failed: Vec<String> = self.failed_criteria.iter().map(Criterion::to_string).collect();
            format!("✗ ({})", failed.join(", "))
        }
    }
}

/// Applies the conjunction H ≥ θ_H ∧ E ≥ θ_E ∧ SNR ≥ θ_SNR, listing every
/// violated criterion.
pub fn evaluate_rule(d: &Diagnostics, t: &ThresholdTriple) -> DiagnosticRow {
    let mut failed = Vec::new();
    if d.headroom.is_nan() || d.headroom < t.headroom {
        failed.push(Criterion::H);
    }
    if d.support < t.support {
        failed.push(Criterion::E);
    }
    if d.snr.is_nan() || d.snr < t.snr {
        failed.push(Criterion::Snr);
    }
    DiagnosticRow {
        diagnostics: d.clone(),
        pass: failed.is_empty(),
        failed_criteria: failed,
    }
}

/// One minus the majority-class baseline; the ceiling is 1 for every metric.
pub fn headroom(metric: MetricId, gold: &[Label], weighting: KappaWeighting) -> Result<f64, IdentifyError> {
    Ok(1.0 - majority_baseline(metric, gold, weighting)?.value)
}

/// `n` for item-averaging metrics, the rarest gold class count for A5.
pub fn effective_support(metric: MetricId, gold: &[Label]) -> usize {
    match metric {
        MetricId::A5 => {
            let dist = ClassDistribution::from_labels(gold);
            dist.counts.values().copied().filter(|&c| c > 0).min().unwrap_or(0)
        }
        _ => gold.len(),
    }
}

fn signal_to_noise(spread: f64, se: f64) -> (f64, Option<String>) {
    if se > 0.0 {
        (spread / se, None)
    } else if spread > 0.0 {
        (
            f64::INFINITY,
            Some("degenerate SE: bootstrap SD is zero with non-zero spread".into()),
        )
    } else {
        (0.0, Some("no between-model spread and zero SE".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub metric: MetricId,
    pub se: f64,
    pub spread: f64,
    #[serde(with = "float_or_inf")]
    pub snr: f64,
    /// Point score of each model on the primary cell, in grid model order.
    pub model_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// SE, spread and SNR for each metric on the primary cell. One clustered
/// bootstrap drives every model and metric, so all share index multisets.
pub fn noise_estimates(
    grid: &PredictionGrid,
    dataset: &Dataset,
    primary: &InferencePolicy,
    metrics: &[MetricId],
    plan: &ResamplePlan,
    weighting: KappaWeighting,
) -> Result<Vec<NoiseEstimate>, IdentifyError> {
    let gold = dataset.gold();
    let cells: Vec<&[Label]> = grid
        .models()
        .iter()
        .map(|m| grid.cell_labels(m, primary))
        .collect::<Result<_, _>>()?;
    let k = metrics.len();
    let boot = clustered_bootstrap(
        |idx: &[usize]| -> Result<Vec<f64>, IdentifyError> {
            let mut out = Vec::with_capacity(cells.len() * k);
            for pred in &cells {
                let confusion = Confusion::from_indices(pred, &gold, idx);
                for &metric in metrics {
                    out.push(confusion.score(metric, weighting)?.value);
                }
            }
            Ok(out)
        },
        gold.len(),
        plan,
    )?;
    Ok(metrics
        .iter()
        .enumerate()
        .map(|(j, &metric)| {
            let model_scores: Vec<f64> = (0..cells.len()).map(|m| boot.point[m * k + j]).collect();
            let se = mean(
                &(0..cells.len())
                    .map(|m| std_dev(&boot.component(m * k + j)))
                    .collect::<Vec<_>>(),
            );
            let spread = model_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - model_scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let (snr, note) = signal_to_noise(spread, se);
            NoiseEstimate {
                metric,
                se,
                spread,
                snr,
                model_scores,
                note,
            }
        })
        .collect())
}

pub fn metric_noise(
    metric: MetricId,
    grid: &PredictionGrid,
    primary: &InferencePolicy,
    dataset: &Dataset,
    plan: &ResamplePlan,
    weighting: KappaWeighting,
) -> Result<NoiseEstimate, IdentifyError> {
    let mut v = noise_estimates(grid, dataset, primary, &[metric], plan, weighting)?;
    Ok(v.remove(0))
}

/// Diagnostics and rule verdict for all five metrics.
pub fn identifiability_table(
    grid: &PredictionGrid,
    dataset: &Dataset,
    primary: &InferencePolicy,
    thresholds: &ThresholdTriple,
    plan: &ResamplePlan,
    weighting: KappaWeighting,
) -> Result<Vec<DiagnosticRow>, IdentifyError> {
    thresholds.validate()?;
    let gold = dataset.gold();
    let noise = noise_estimates(grid, dataset, primary, &MetricId::ALL, plan, weighting)?;
    noise
        .into_iter()
        .map(|ne| {
            let d = Diagnostics {
                metric: ne.metric,
                headroom: headroom(ne.metric, &gold, weighting)?,
                support: effective_support(ne.metric, &gold),
                se: ne.se,
                spread: ne.spread,
                snr: ne.snr,
                note: ne.note,
            };
            Ok(evaluate_rule(&d, thresholds))
        })
        .collect()
}

/// Metrics whose rows pass, in metric order.
pub fn pass_set(rows: &[DiagnosticRow]) -> Vec<MetricId> {
    let mut v: Vec<MetricId> = rows.iter().filter(|r| r.pass).map(DiagnosticRow::metric).collect();
    v.sort();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSubset {
    pub label: String,
    pub metrics: Vec<MetricId>,
}

impl MetricSubset {
    pub fn new(label: impl Into<String>, metrics: &[MetricId]) -> Self {
        MetricSubset {
            label: label.into(),
            metrics: metrics.to_vec(),
        }
    }
}

pub const CLEAN_METRICS: [MetricId; 3] = [MetricId::A1, MetricId::A2, MetricId::A4];

/// Full set, clean set, the two single failing metrics, and the five
/// leave-one-out sets.
pub fn default_lomo_subsets() -> Vec<MetricSubset> {
    let mut v = vec![
        MetricSubset::new("full", &MetricId::ALL),
        MetricSubset::new("clean", &CLEAN_METRICS),
        MetricSubset::new("A3 only", &[MetricId::A3]),
        MetricSubset::new("A5 only", &[MetricId::A5]),
    ];
    for left_out in MetricId::ALL {
        let rest: Vec<MetricId> = MetricId::ALL.into_iter().filter(|&m| m != left_out).collect();
        v.push(MetricSubset::new(format!("LOMO-{left_out}"), &rest));
    }
    v
}

pub const DEFAULT_LOMO_AGGREGATORS: [Aggregator; 3] =
    [Aggregator::BradleyTerry, Aggregator::Borda, Aggregator::RankedPairs];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LomoRow {
    pub subset: MetricSubset,
    pub outcomes: Vec<AggregateOutcome>,
    /// True iff every aggregator returned the same strict ranking.
    pub agree: bool,
}

pub fn lomo_decomposition(
    table: &ScoreTable,
    subsets: &[MetricSubset],
    aggregators: &[Aggregator],
) -> Result<Vec<LomoRow>, IdentifyError> {
    if aggregators.is_empty() {
        return Err(IdentifyError::NoAggregators);
    }
    subsets
        .iter()
        .map(|subset| {
            if subset.metrics.is_empty() {
                return Err(IdentifyError::EmptySubset);
            }
            let outcomes = aggregators
                .iter()
                .map(|&a| aggregate(a, table, &subset.metrics))
                .collect::<Result<Vec<_>, _>>()?;
            let first = &outcomes[0].ranking;
            let agree = first.is_strict() && outcomes.iter().all(|o| &o.ranking == first);
            Ok(LomoRow {
                subset: subset.clone(),
                outcomes,
                agree,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DeclaredGrid;
    use crate::rank::Ranking;
    use proptest::prelude::*;

    fn labels(v: &[i8]) -> Vec<Label> {
        v.iter().map(|&x| Label::try_from(x).unwrap()).collect()
    }

    fn published_gold() -> Vec<Label> {
        let counts = [(-2i8, 2usize), (-1, 11), (0, 72), (1, 139), (2, 29)];
        counts
            .iter()
            .flat_map(|&(l, c)| std::iter::repeat(Label::try_from(l).unwrap()).take(c))
            .collect()
    }

    #[test]
    fn published_headroom_and_support() {
        let gold = published_gold();
        let w = KappaWeighting::Quadratic;
        assert!((headroom(MetricId::A1, &gold, w).unwrap() - 114.0 / 253.0).abs() < 1e-12);
        assert!((headroom(MetricId::A4, &gold, w).unwrap() - 1.0).abs() < 1e-12);
        assert!((headroom(MetricId::A5, &gold, w).unwrap() - 1.0).abs() < 1e-12);
        assert!((headroom(MetricId::A3, &gold, w).unwrap() - 13.0 / 253.0).abs() < 1e-12);
        assert_eq!(effective_support(MetricId::A1, &gold), 253);
        assert_eq!(effective_support(MetricId::A5, &gold), 2);
        let balanced: Vec<Label> = Label::ALL.iter().flat_map(|&l| std::iter::repeat(l).take(50)).collect();
        assert_eq!(effective_support(MetricId::A5, &balanced), 50);
    }

    #[test]
    fn rule_lists_every_failure() {
        let d = Diagnostics::from_values(MetricId::A5, 1.0, 2, 0.354, 0.25);
        let row = evaluate_rule(&d, &ThresholdTriple::default());
        assert_eq!(row.failed_criteria, vec![Criterion::E, Criterion::Snr]);
        assert_eq!(row.mark(), "✗ (E, SNR)");
        let zero = ThresholdTriple::new(0.0, 0, 0.0).unwrap();
        assert!(evaluate_rule(&d, &zero).pass);
        let strict = ThresholdTriple::new(0.15, 500, 1.0).unwrap();
        let a1 = Diagnostics::from_values(MetricId::A1, 0.451, 253, 0.031, 0.075);
        assert_eq!(evaluate_rule(&a1, &strict).failed_criteria, vec![Criterion::E]);
    }

    #[test]
    fn negative_thresholds_rejected() {
        assert!(ThresholdTriple::new(-0.1, 50, 1.0).is_err());
        assert!(ThresholdTriple::new(0.1, 50, f64::NAN).is_err());
    }

    #[test]
    fn degenerate_se_gives_infinite_snr() {
        let d = Diagnostics::from_values(MetricId::A1, 0.5, 100, 0.0, 0.1);
        assert!(d.snr.is_infinite());
        assert!(d.note.is_some());
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"inf\""));
    }

    fn single_policy_grid(cells: Vec<Vec<Label>>) -> (PredictionGrid, InferencePolicy) {
        let models: Vec<String> = (0..cells.len()).map(|i| format!("m{i}")).collect();
        let declared = DeclaredGrid::factorial(models, &["R1".into()], &["0.0".into()]);
        let policy = declared.policies[0].clone();
        (PredictionGrid::from_cells(&declared, cells).unwrap(), policy)
    }

    #[test]
    fn identical_models_have_zero_spread() {
        let gold = labels(&[1, 1, 0, -1, 2, 1, 0, 1, -2, 1]);
        let dataset = Dataset::from_gold(&gold).unwrap();
        let pred = labels(&[1, 0, 0, -1, 1, 1, 0, 1, -1, 1]);
        let (grid, policy) = single_policy_grid(vec![pred.clone(), pred]);
        let ne = metric_noise(
            MetricId::A1,
            &grid,
            &policy,
            &dataset,
            &ResamplePlan::bootstrap(200, 1),
            KappaWeighting::Quadratic,
        )
        .unwrap();
        assert_eq!(ne.spread, 0.0);
        assert_eq!(ne.snr, 0.0);
        assert!(ne.se > 0.0);
    }

    #[test]
    fn a5_two_item_class_se() {
        // The binding class has 2 items; each model gets each right with
        // probability 1/2 independently, and every other class perfectly.
        // The bootstrap SD of a 2-item recall at p = 0.5 is close to √(0.25/2).
        let mut gold = vec![Label::try_from(-2).unwrap(); 2];
        gold.extend(labels(&[1; 98]));
        let dataset = Dataset::from_gold(&gold).unwrap();
        let mut a = gold.clone();
        a[0] = Label::try_from(-1).unwrap();
        let mut b = gold.clone();
        b[1] = Label::try_from(-1).unwrap();
        let (grid, policy) = single_policy_grid(vec![a, b]);
        let ne = metric_noise(
            MetricId::A5,
            &grid,
            &policy,
            &dataset,
            &ResamplePlan::bootstrap(4000, 9),
            KappaWeighting::Quadratic,
        )
        .unwrap();
        assert!((ne.se - (0.25f64 / 2.0).sqrt()).abs() < 0.05, "se = {}", ne.se);
    }

    fn hand_table() -> ScoreTable {
        // A1, A2, A4: a > b > c. A3, A5: b > c > a.
        let models = vec!["a".to_string(), "b".into(), "c".into()];
        let policies = vec![InferencePolicy::new("R1", "0.0")];
        let strong = [0.9, 0.6, 0.3];
        let weak = [0.1, 0.8, 0.5];
        let mut scores = Vec::new();
        for m in 0..3 {
            for metric in MetricId::ALL {
                let v = if CLEAN_METRICS.contains(&metric) { strong[m] } else { weak[m] };
                scores.push(v);
            }
        }
        ScoreTable::new(models, policies, MetricId::ALL.to_vec(), scores).unwrap()
    }

    #[test]
    fn lomo_full_disagrees_clean_agrees() {
        let aggs = [
            Aggregator::BradleyTerry,
            Aggregator::Borda,
            Aggregator::RankedPairs,
            Aggregator::Copeland,
        ];
        let rows = lomo_decomposition(&hand_table(), &default_lomo_subsets(), &aggs).unwrap();
        assert_eq!(rows.len(), 9);
        let full = &rows[0];
        assert!(!full.agree);
        // Borda: a gets 2+2+0+2+0 = 6, b gets 1+1+2+1+2 = 7, c gets 2.
        assert_eq!(full.outcomes[1].ranking, Ranking::strict(&["b", "a", "c"]));
        // Head to head a beats b 3:2, so the majority rules put a first.
        assert_eq!(full.outcomes[2].ranking, Ranking::strict(&["a", "b", "c"]));
        let clean = &rows[1];
        assert!(clean.agree);
        assert_eq!(clean.outcomes[0].ranking, Ranking::strict(&["a", "b", "c"]));
    }

    #[test]
    fn lomo_agreement_invariant_to_aggregator_order_and_names() {
        let table = hand_table();
        let subsets = default_lomo_subsets();
        let fwd = lomo_decomposition(&table, &subsets, &Aggregator::ALL).unwrap();
        let mut rev_aggs = Aggregator::ALL;
        rev_aggs.reverse();
        let rev = lomo_decomposition(&table, &subsets, &rev_aggs).unwrap();
        let renamed = table.relabel(|m| format!("z{m}"));
        let ren = lomo_decomposition(&renamed, &subsets, &Aggregator::ALL).unwrap();
        for ((a, b), c) in fwd.iter().zip(&rev).zip(&ren) {
            assert_eq!(a.agree, b.agree);
            assert_eq!(a.agree, c.agree);
        }
    }

    #[test]
    fn lomo_empty_subset_is_error() {
        let err = lomo_decomposition(&hand_table(), &[MetricSubset::new("none", &[])], &Aggregator::ALL);
        assert_eq!(err.unwrap_err(), IdentifyError::EmptySubset);
    }

    proptest! {
        #[test]
        fn rule_matches_independent_evaluation(
            h in 0.0f64..1.0, e in 0usize..400, se in 0.001f64..0.2, spread in 0.0f64..0.3,
            th in 0.0f64..0.5, te in 0usize..500, ts in 0.0f64..3.0,
        ) {
            let d = Diagnostics::from_values(MetricId::A2, h, e, se, spread);
            let t = ThresholdTriple::new(th, te, ts).unwrap();
            let row = evaluate_rule(&d, &t);
            let expected = h >= th && e >= te && spread / se >= ts;
            prop_assert_eq!(row.pass, expected);
            prop_assert_eq!(row.failed_criteria.is_empty(), row.pass);
        }
    }
}
