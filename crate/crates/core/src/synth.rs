//! Synthetic gold distributions, simulated model grids, and the Monte-Carlo
//! sweep of identifiability thresholds.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Dataset, Label};
use crate::grid::{DeclaredGrid, GridError, InferencePolicy, MetricId, PredictionGrid};
use crate::identify::{evaluate_rule, noise_estimates, Diagnostics, IdentifyError, ThresholdTriple, CLEAN_METRICS};
use crate::identify::{effective_support, headroom};
use crate::metrics::KappaWeighting;
use crate::rank::{borda, RankError, ScoreTable};
use crate::resample::{replicate_rng, ResamplePlan};

const GOLD_STREAM: u64 = 3 << 32;
const MODEL_STREAM: u64 = 4 << 32;
const BOOTSTRAP_STREAM: u64 = 5 << 32;

pub const DEFAULT_BASE_ACCURACY: f64 = 0.62;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("infeasible cell: {0}")]
    InfeasibleCell(String),
    #[error("accuracy ladder leaves (0, 1): base {base}, h {h}, {n_models} models")]
    InfeasibleEffect { base: f64, h: f64, n_models: usize },
    #[error("{0} list is empty")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Rank(#[from] RankError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimCell {
    pub n_items: usize,
    pub gini: f64,
    pub rarest_count: usize,
    pub majority_prevalence: f64,
    pub cohens_h: f64,
    pub n_models: usize,
}

impl SimCell {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InfeasibleCell(msg));
        if self.n_models < 2 {
            return bad(format!("{} models", self.n_models));
        }
        if !(self.majority_prevalence > 0.0 && self.majority_prevalence < 1.0) {
            return bad(format!("majority prevalence {}", self.majority_prevalence));
        }
        if self.rarest_count == 0 {
            return bad("rarest class must be non-empty".into());
        }
        let minority = self.n_items as f64 * (1.0 - self.majority_prevalence);
        if self.rarest_count as f64 > minority {
            return bad(format!("rarest count {} exceeds minority mass {minority}", self.rarest_count));
        }
        // The three middle classes sit between the rarest count and the majority.
        let majority = (self.n_items as f64 * self.majority_prevalence).round() as usize;
        let rest = self.n_items as i64 - majority as i64 - self.rarest_count as i64;
        if majority <= self.rarest_count
            || rest < 3 * self.rarest_count as i64
            || rest > 3 * (majority as i64 - 1)
        {
            return bad(format!(
                "{} items cannot hold majority {majority} and rarest {}",
                self.n_items, self.rarest_count
            ));
        }
        Ok(())
    }
}

/// Gold-distribution shapes × rarest-class counts × effect sizes at
/// n = 250, prevalence 0.5, four models.
pub fn default_cells() -> Vec<SimCell> {
    let mut v = Vec::new();
    for gini in [0.4, 0.6] {
        for rarest in [2, 10] {
            for h in [0.1, 0.2] {
                v.push(SimCell {
                    n_items: 250,
                    gini,
                    rarest_count: rarest,
                    majority_prevalence: 0.5,
                    cohens_h: h,
                    n_models: 4,
                });
            }
        }
    }
    v
}

/// H × E × SNR grid of 45 triples.
pub fn default_triples() -> Vec<ThresholdTriple> {
    let mut v = Vec::new();
    for h in [0.075, 0.150, 0.225] {
        for e in [25, 50, 75, 250, 500] {
            for s in [0.5, 1.0, 1.5] {
                v.push(ThresholdTriple {
                    headroom: h,
                    support: e,
                    snr: s,
                });
            }
        }
    }
    v
}

/// Half the mean absolute pairwise difference of `counts` as proportions,
/// over the mean proportion.
pub fn gini(counts: &[usize]) -> f64 {
    let k = counts.len() as f64;
    let total: usize = counts.iter().sum();
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mad: f64 = p.iter().flat_map(|a| p.iter().map(move |b| (a - b).abs())).sum::<f64>() / (k * k);
    mad / (2.0 * (1.0 / k))
}

/// Exact class counts in label order −2..=+2.
pub fn gold_counts(cell: &SimCell) -> Result<[usize; 5], SynthError> {
    cell.validate()?;
    let n = cell.n_items;
    let majority = (n as f64 * cell.majority_prevalence).round() as usize;
    let rarest = cell.rarest_count;
    let rest = n
        .checked_sub(majority + rarest)
        .ok_or_else(|| SynthError::InfeasibleCell("majority and rarest exceed n".into()))?;
    // Remaining classes by size: c0 ≥ c2 ≥ c_neg1 ≥ rarest, all below the majority.
    let mut best: Option<([usize; 5], f64)> = None;
    for c0 in (0..=rest.min(majority.saturating_sub(1))).rev() {
        for c2 in (rarest..=c0.min(rest - c0)).rev() {
            let Some(cm1) = rest.checked_sub(c0 + c2) else { continue };
            if cm1 < rarest || cm1 > c2 {
                continue;
            }
            let counts = [rarest, cm1, c0, majority, c2];
            let gap = (gini(&counts) - cell.gini).abs();
            if best.is_none_or(|(_, g)| gap < g) {
                best = Some((counts, gap));
            }
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| SynthError::InfeasibleCell(format!("no class split for {cell:?}")))
}

/// Gold labels with exact counts from [`gold_counts`], in shuffled order.
pub fn make_gold(cell: &SimCell, seed: u64) -> Result<Vec<Label>, SynthError> {
    let counts = gold_counts(cell)?;
    let mut gold: Vec<Label> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat(Label::from_index(k)).take(c))
        .collect();
    gold.shuffle(&mut replicate_rng(seed, GOLD_STREAM, 0));
    Ok(gold)
}

/// Accuracies spaced `h` apart on the arcsine scale, best first.
pub fn accuracy_ladder(base: f64, h: f64, n_models: usize) -> Result<Vec<f64>, SynthError> {
    let infeasible = || SynthError::InfeasibleEffect { base, h, n_models };
    if !(base > 0.0 && base < 1.0) {
        return Err(infeasible());
    }
    let top = 2.0 * base.sqrt().asin();
    (0..n_models)
        .map(|k| {
            let phi = top - h * k as f64;
            if phi <= 0.0 || phi >= std::f64::consts::PI {
                Err(infeasible())
            } else {
                Ok((phi / 2.0).sin().powi(2))
            }
        })
        .collect()
}

pub fn synthetic_policy() -> InferencePolicy {
    InferencePolicy::new("sim", "0.0")
}

pub fn model_name(k: usize) -> String {
    format!("sim-{k}")
}

fn adjacent_error(gold: Label, rng: &mut impl Rng) -> Label {
    let v = gold.value();
    let step: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
    let mut out = v + step;
    if !(Label::MIN..=Label::MAX).contains(&out) {
        out = v - step;
    }
    Label::try_from(out).expect("adjacent label in range")
}

/// Single-policy grid of `n_models` models on the accuracy ladder. Wrong
/// answers land on an adjacent class, reflected at the scale ends.
pub fn simulate_models(
    gold: &[Label],
    base_accuracy: f64,
    h: f64,
    n_models: usize,
    seed: u64,
) -> Result<PredictionGrid, SynthError> {
    simulate_stream(gold, base_accuracy, h, n_models, seed, 0)
}

fn simulate_stream(
    gold: &[Label],
    base_accuracy: f64,
    h: f64,
    n_models: usize,
    seed: u64,
    stream: u64,
) -> Result<PredictionGrid, SynthError> {
    let ladder = accuracy_ladder(base_accuracy, h, n_models)?;
    let cells: Vec<Vec<Label>> = ladder
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let mut rng = replicate_rng(seed, MODEL_STREAM + stream * n_models as u64 + k as u64, 0);
            gold.iter()
                .map(|&g| if rng.gen_bool(p) { g } else { adjacent_error(g, &mut rng) })
                .collect()
        })
        .collect();
    let declared = DeclaredGrid {
        models: (0..n_models).map(model_name).collect(),
        policies: vec![synthetic_policy()],
    };
    Ok(PredictionGrid::from_cells(&declared, cells)?)
}

/// Gold labels with the given counts in label order −2..=+2, shuffled.
pub fn gold_from_counts(counts: [usize; 5], seed: u64) -> Vec<Label> {
    let mut gold: Vec<Label> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat(Label::from_index(k)).take(c))
        .collect();
    gold.shuffle(&mut replicate_rng(seed, GOLD_STREAM, 1));
    gold
}

/// Full rubric × temperature grid; every policy draws fresh noise around
/// the same accuracy ladder.
pub fn simulate_policy_grid(
    gold: &[Label],
    base_accuracy: f64,
    h: f64,
    models: usize,
    rubrics: &[String],
    temperatures: &[String],
    seed: u64,
) -> Result<PredictionGrid, SynthError> {
    let declared = DeclaredGrid::factorial((0..models).map(model_name).collect(), rubrics, temperatures);
    let per_policy: Vec<PredictionGrid> = (0..declared.policies.len())
        .map(|p| simulate_stream(gold, base_accuracy, h, models, seed, p as u64))
        .collect::<Result<_, _>>()?;
    let policy = synthetic_policy();
    let mut cells = Vec::with_capacity(models * per_policy.len());
    for m in 0..models {
        for g in &per_policy {
            cells.push(g.cell_labels(&model_name(m), &policy)?.to_vec());
        }
    }
    Ok(PredictionGrid::from_cells(&declared, cells)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub replicates: usize,
    pub bootstrap_replicates: usize,
    pub seed: u64,
    pub base_accuracy: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            replicates: 200,
            bootstrap_replicates: 1000,
            seed: 42,
            base_accuracy: DEFAULT_BASE_ACCURACY,
        }
    }
}

/// Outcome of one (cell, threshold triple) combination over all replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub cell: SimCell,
    pub achieved_gini: f64,
    pub triple: ThresholdTriple,
    /// `θ_E ≤ n`.
    pub feasible: bool,
    /// Pass rate per metric, in `MetricId::ALL` order.
    pub per_metric_pass_rate: Vec<f64>,
    /// Share of replicates whose pass set is exactly {A1, A2, A4}.
    pub partition_match: f64,
    /// Share of replicates where the best synthetic model alone tops the
    /// Borda ranking on {A1, A2, A4}.
    pub top1_recovery: f64,
}

impl SimOutcome {
    pub fn pass_rate(&self, metric: MetricId) -> f64 {
        let k = MetricId::ALL.iter().position(|&m| m == metric).expect("known metric");
        self.per_metric_pass_rate[k]
    }
}

struct ReplicateDiagnostics {
    diagnostics: Vec<Diagnostics>,
    top1: bool,
}

fn replicate_diagnostics(
    cell: &SimCell,
    dataset: &Dataset,
    config: &SweepConfig,
    stream: u64,
) -> Result<ReplicateDiagnostics, SynthError> {
    let gold = dataset.gold();
    let grid = simulate_stream(&gold, config.base_accuracy, cell.cohens_h, cell.n_models, config.seed, stream)?;
    let policy = synthetic_policy();
    let plan = ResamplePlan::bootstrap(config.bootstrap_replicates, config.seed).with_stream(BOOTSTRAP_STREAM + stream);
    let w = KappaWeighting::Quadratic;
    let noise = noise_estimates(&grid, dataset, &policy, &MetricId::ALL, &plan, w)?;
    let diagnostics = noise
        .iter()
        .map(|ne| {
            Ok(Diagnostics {
                metric: ne.metric,
                headroom: headroom(ne.metric, &gold, w)?,
                support: effective_support(ne.metric, &gold),
                se: ne.se,
                spread: ne.spread,
                snr: ne.snr,
                note: None,
            })
        })
        .collect::<Result<Vec<_>, IdentifyError>>()?;
    let table = ScoreTable::from_grid(&grid, dataset, &CLEAN_METRICS, w)?;
    let ranking = borda(&table, &CLEAN_METRICS)?;
    let top1 = ranking.top() == [model_name(0)];
    Ok(ReplicateDiagnostics { diagnostics, top1 })
}

/// Runs every cell for `config.replicates` replicates and scores each
/// replicate's diagnostics under every threshold triple.
pub fn threshold_sweep(
    cells: &[SimCell],
    triples: &[ThresholdTriple],
    config: &SweepConfig,
) -> Result<Vec<SimOutcome>, SynthError> {
    if cells.is_empty() {
        return Err(SynthError::EmptyInput("cell"));
    }
    if triples.is_empty() {
        return Err(SynthError::EmptyInput("threshold triple"));
    }
    if config.replicates == 0 {
        return Err(SynthError::EmptyInput("replicate"));
    }
    let mut out = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let gold = make_gold(cell, config.seed.wrapping_add(c as u64))?;
        let achieved_gini = gini(&gold_counts(cell)?);
        let dataset = Dataset::from_gold(&gold)?;
        let reps: Vec<ReplicateDiagnostics> = (0..config.replicates)
            .into_par_iter()
            .map(|r| replicate_diagnostics(cell, &dataset, config, (c * config.replicates + r) as u64))
            .collect::<Result<_, _>>()?;
        let top1 = reps.iter().filter(|r| r.top1).count() as f64 / reps.len() as f64;
        for triple in triples {
            let mut passes = [0usize; 5];
            let mut matches = 0usize;
            for rep in &reps {
                let mut pass_set = Vec::new();
                for (k, d) in rep.diagnostics.iter().enumerate() {
                    if evaluate_rule(d, triple).pass {
                        passes[k] += 1;
                        pass_set.push(d.metric);
                    }
                }
                if pass_set == CLEAN_METRICS {
                    matches += 1;
                }
            }
            let b = reps.len() as f64;
            out.push(SimOutcome {
                cell: *cell,
                achieved_gini,
                triple: *triple,
                feasible: triple.support <= cell.n_items,
                per_metric_pass_rate: passes.iter().map(|&p| p as f64 / b).collect(),
                partition_match: matches as f64 / b,
                top1_recovery: top1,
            });
        }
    }
    Ok(out)
}
