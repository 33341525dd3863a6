//! Ordinal metrics, trivial baselines, binomial intervals and the paired
//! minimum detectable effect.
//!
//! Every metric is computed from a 5×5 gold-by-prediction [`Confusion`]
//! table, so bootstrap replicates only need to rebuild the table from an
//! index multiset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::grid::MetricId;
use crate::stats::{beta_quantile, normal_quantile};

const K: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction length {pred} does not match gold length {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("metric input is empty")]
    Empty,
    #[error("weighted kappa undefined: expected disagreement is zero but observed is not")]
    DegenerateMarginals,
    #[error("invalid binomial count: {successes} successes out of {n}")]
    InvalidCount { successes: f64, n: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no detectable difference below the discordant rate {discordant_rate} satisfies the power equation")]
    InfeasibleDesign { discordant_rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeighting {
    #[default]
    Quadratic,
    Linear,
}

impl KappaWeighting {
    /// Disagreement weight between scale positions `i` and `j`, normalised to [0, 1].
    pub fn weight(self, i: usize, j: usize) -> f64 {
        let d = i.abs_diff(j) as f64 / (K - 1) as f64;
        match self {
            KappaWeighting::Quadratic => d * d,
            KappaWeighting::Linear => d,
        }
    }

    /// `weight` times `(K - 1)²` (quadratic) or `K - 1` (linear).
    fn scaled_weight(self, i: usize, j: usize) -> u64 {
        let d = i.abs_diff(j) as u64;
        match self {
            KappaWeighting::Quadratic => d * d,
            KappaWeighting::Linear => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub metric: MetricId,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMethod {
    Wilson,
    ClopperPearson,
    PercentileBootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: IntervalMethod,
    pub confidence: f64,
}

impl IntervalEstimate {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

/// Gold-by-prediction count table over the five-level scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    counts: [[u32; K]; K],
    n: u32,
}

impl Confusion {
    pub fn from_labels(pred: &[Label], gold: &[Label]) -> Result<Self, MetricError> {
        check_lengths(pred, gold)?;
        let mut c = Confusion {
            counts: [[0; K]; K],
            n: 0,
        };
        for (p, g) in pred.iter().zip(gold) {
            c.add(*g, *p);
        }
        Ok(c)
    }

    /// Table over the multiset of item positions `indices`.
    pub fn from_indices(pred: &[Label], gold: &[Label], indices: &[usize]) -> Self {
        let mut c = Confusion {
            counts: [[0; K]; K],
            n: 0,
        };
        for &i in indices {
            c.add(gold[i], pred[i]);
        }
        c
    }

    fn add(&mut self, gold: Label, pred: Label) {
        self.counts[gold.index()][pred.index()] += 1;
        self.n += 1;
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn gold_support(&self, class: usize) -> u32 {
        self.counts[class].iter().sum()
    }

    fn predicted(&self, class: usize) -> u32 {
        (0..K).map(|g| self.counts[g][class]).sum()
    }

    pub fn exact_accuracy(&self) -> f64 {
        let hits: u32 = (0..K).map(|c| self.counts[c][c]).sum();
        hits as f64 / self.n as f64
    }

    pub fn within_one_accuracy(&self) -> f64 {
        let mut hits = 0u32;
        for g in 0..K {
            for p in 0..K {
                if g.abs_diff(p) <= 1 {
                    hits += self.counts[g][p];
                }
            }
        }
        hits as f64 / self.n as f64
    }

    /// Mean F1 over classes with gold support; zero-prediction classes score 0.
    pub fn macro_f1(&self) -> f64 {
        let mut total = 0.0;
        let mut classes = 0usize;
        for c in 0..K {
            let support = self.gold_support(c);
            if support == 0 {
                continue;
            }
            let tp = self.counts[c][c] as f64;
            let fp = self.predicted(c) as f64 - tp;
            let fn_ = support as f64 - tp;
            total += 2.0 * tp / (2.0 * tp + fp + fn_);
            classes += 1;
        }
        total / classes as f64
    }

    /// Computed in integers (weights scaled to whole numbers, both terms
    /// scaled by n²) so that e.g. a constant predictor gives exactly 0.
    pub fn weighted_kappa(&self, weighting: KappaWeighting) -> Result<f64, MetricError> {
        let n = self.n as u128;
        let (mut observed, mut expected) = (0u128, 0u128);
        for g in 0..K {
            for p in 0..K {
                let w = weighting.scaled_weight(g, p) as u128;
                observed += w * self.counts[g][p] as u128 * n;
                expected += w * self.gold_support(g) as u128 * self.predicted(p) as u128;
            }
        }
        let (observed, expected) = (observed as f64, expected as f64);
        if expected == 0.0 {
            return if observed == 0.0 {
                Ok(0.0)
            } else {
                Err(MetricError::DegenerateMarginals)
            };
        }
        Ok(1.0 - observed / expected)
    }

    /// Minimum per-class recall over gold-supported classes, with the binding
    /// class (lowest label among ties) and its support.
    pub fn worst_class_accuracy(&self) -> (f64, Label, u32) {
        let mut best: Option<(f64, usize, u32)> = None;
        for c in 0..K {
            let support = self.gold_support(c);
            if support == 0 {
                continue;
            }
            let recall = self.counts[c][c] as f64 / support as f64;
            if best.map_or(true, |(r, _, _)| recall < r) {
                best = Some((recall, c, support));
            }
        }
        let (r, c, s) = best.expect("non-empty table has a supported class");
        (r, Label::from_index(c), s)
    }

    /// Scores one metric from the table.
    pub fn score(&self, metric: MetricId, weighting: KappaWeighting) -> Result<MetricScore, MetricError> {
        if self.n == 0 {
            return Err(MetricError::Empty);
        }
        let (value, support_note) = match metric {
            MetricId::A1 => (self.exact_accuracy(), None),
            MetricId::A2 => (self.macro_f1(), None),
            MetricId::A3 => (self.within_one_accuracy(), None),
            MetricId::A4 => (self.weighted_kappa(weighting)?, None),
            MetricId::A5 => {
                let (v, class, support) = self.worst_class_accuracy();
                (v, Some(format!("binding class {class} (n={support})")))
            }
        };
        Ok(MetricScore {
            metric,
            value,
            support_note,
        })
    }
}

fn check_lengths(pred: &[Label], gold: &[Label]) -> Result<(), MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn evaluate(
    metric: MetricId,
    pred: &[Label],
    gold: &[Label],
    weighting: KappaWeighting,
) -> Result<MetricScore, MetricError> {
    Confusion::from_labels(pred, gold)?.score(metric, weighting)
}

pub fn exact_accuracy(pred: &[Label], gold: &[Label]) -> Result<MetricScore, MetricError> {
    evaluate(MetricId::A1, pred, gold, KappaWeighting::default())
}

pub fn macro_f1(pred: &[Label], gold: &[Label]) -> Result<MetricScore, MetricError> {
    evaluate(MetricId::A2, pred, gold, KappaWeighting::default())
}

pub fn within_one_accuracy(pred: &[Label], gold: &[Label]) -> Result<MetricScore, MetricError> {
    evaluate(MetricId::A3, pred, gold, KappaWeighting::default())
}

pub fn weighted_kappa(pred: &[Label], gold: &[Label], weighting: KappaWeighting) -> Result<MetricScore, MetricError> {
    evaluate(MetricId::A4, pred, gold, weighting)
}

pub fn worst_class_accuracy(pred: &[Label], gold: &[Label]) -> Result<MetricScore, MetricError> {
    evaluate(MetricId::A5, pred, gold, KappaWeighting::default())
}

/// Modal gold class; ties resolve toward the higher label.
pub fn modal_class(gold: &[Label]) -> Option<Label> {
    let mut counts = [0usize; K];
    for g in gold {
        counts[g.index()] += 1;
    }
    // max_by_key keeps the last maximum, i.e. the highest label on ties
    (0..K)
        .max_by_key(|&c| counts[c])
        .filter(|&c| counts[c] > 0)
        .map(Label::from_index)
}

/// Metric value of the constant predictor that always emits the modal class.
pub fn majority_baseline(metric: MetricId, gold: &[Label], weighting: KappaWeighting) -> Result<MetricScore, MetricError> {
    let mode = modal_class(gold).ok_or(MetricError::Empty)?;
    let pred = vec![mode; gold.len()];
    evaluate(metric, &pred, gold, weighting)
}

fn validate_confidence(confidence: f64) -> Result<(), MetricError> {
    if confidence > 0.0 && confidence < 1.0 {
        Ok(())
    } else {
        Err(MetricError::InvalidArgument(format!(
            "confidence {confidence} must lie in (0, 1)"
        )))
    }
}

fn wilson(p_hat: f64, n: f64, z: f64) -> (f64, f64) {
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p_hat + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

fn clopper_pearson(x: f64, n: f64, alpha: f64) -> (f64, f64) {
    const TOL: f64 = 1e-10;
    let lower = if x <= 0.0 {
        0.0
    } else {
        beta_quantile(alpha / 2.0, x, n - x + 1.0, TOL)
    };
    let upper = if x >= n {
        1.0
    } else {
        beta_quantile(1.0 - alpha / 2.0, x + 1.0, n - x, TOL)
    };
    (lower, upper)
}

/// Binomial interval from a (possibly fractional) success count.
pub fn binomial_interval_from_proportion(
    p_hat: f64,
    n: usize,
    confidence: f64,
    method: IntervalMethod,
) -> Result<IntervalEstimate, MetricError> {
    validate_confidence(confidence)?;
    if n == 0 || !(0.0..=1.0).contains(&p_hat) {
        return Err(MetricError::InvalidCount {
            successes: p_hat * n as f64,
            n,
        });
    }
    let alpha = 1.0 - confidence;
    let nf = n as f64;
    let (lower, upper) = match method {
        IntervalMethod::Wilson => wilson(p_hat, nf, normal_quantile(1.0 - alpha / 2.0)),
        IntervalMethod::ClopperPearson => clopper_pearson(p_hat * nf, nf, alpha),
        IntervalMethod::PercentileBootstrap => {
            return Err(MetricError::InvalidArgument(
                "percentile intervals come from the resample module".into(),
            ))
        }
    };
    Ok(IntervalEstimate {
        point: p_hat,
        lower: lower.min(p_hat),
        upper: upper.max(p_hat),
        method,
        confidence,
    })
}

pub fn binomial_interval(
    successes: usize,
    n: usize,
    confidence: f64,
    method: IntervalMethod,
) -> Result<IntervalEstimate, MetricError> {
    if n == 0 || successes > n {
        return Err(MetricError::InvalidCount {
            successes: successes as f64,
            n,
        });
    }
    binomial_interval_from_proportion(successes as f64 / n as f64, n, confidence, method)
}

/// Smallest matched-pair accuracy difference detectable by a two-sided
/// McNemar test (normal approximation) with `n` pairs, a discordant-pair
/// rate `discordant_rate`, level `alpha` and the requested `power`.
///
/// Solves `δ√n = z_{1-α/2}·√d + z_{power}·√(d − δ²)` for δ in (0, d).
pub fn mcnemar_mde(n: usize, discordant_rate: f64, alpha: f64, power: f64) -> Result<f64, MetricError> {
    let d = discordant_rate;
    if n == 0 || !(d > 0.0 && d < 1.0) {
        return Err(MetricError::InvalidArgument(format!(
            "need n ≥ 1 and discordant rate in (0, 1), got n={n}, d={d}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0 && power > 0.0 && power < 1.0) {
        return Err(MetricError::InvalidArgument(format!(
            "alpha {alpha} and power {power} must lie in (0, 1)"
        )));
    }
    let z_a = normal_quantile(1.0 - alpha / 2.0);
    let z_b = normal_quantile(power);
    let root_n = (n as f64).sqrt();
    let gap = |delta: f64| delta * root_n - z_a * d.sqrt() - z_b * (d - delta * delta).max(0.0).sqrt();
    let (mut lo, mut hi) = (0.0, d);
    if gap(lo) >= 0.0 || gap(hi) < 0.0 {
        return Err(MetricError::InfeasibleDesign { discordant_rate: d });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
