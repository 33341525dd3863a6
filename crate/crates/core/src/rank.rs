//! Pairwise win matrices over scoring policies and the rank aggregators
//! built on them.
//!
//! A scoring policy is one (inference policy, metric) pair. For every scoring
//! policy and model pair the higher score takes one win; equal scores give
//! each side half a win.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::grid::{GridError, InferencePolicy, MetricId, PredictionGrid};
use crate::metrics::{Confusion, KappaWeighting, MetricError};
use crate::resample::{replicate_rng, ResampleError, ResamplePlan, ResampleScheme};
use crate::stats::{mean, percentile_sorted, sorted_copy};

/// Relative convergence tolerance for the Bradley–Terry MM iteration.
pub const BT_TOLERANCE: f64 = 1e-10;
pub const BT_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("score table does not cover {0}")]
    IncompleteTable(String),
    #[error("metric subset is empty")]
    EmptySubset,
    #[error("Bradley–Terry MLE does not exist: comparison graph splits into {components:?}")]
    DegenerateComparisons { components: Vec<Vec<String>> },
    #[error("rankings cover different model sets")]
    ModelSetMismatch,
    #[error("no policy pairs differ only in {0}")]
    NoEligiblePairs(Dimension),
    #[error("win matrix violates wins(a,b) + wins(b,a) = {n_policies} for ({a}, {b})")]
    Conservation { a: String, b: String, n_policies: f64 },
    #[error("pairwise outcome {0} is not one of 0, 0.5, 1")]
    InvalidOutcome(f64),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScoringPolicy {
    pub policy: InferencePolicy,
    pub metric: MetricId,
}

impl fmt::Display for ScoringPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.policy, self.metric)
    }
}

/// Dense (model, inference policy, metric) → score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    models: Vec<String>,
    policies: Vec<InferencePolicy>,
    metrics: Vec<MetricId>,
    /// Indexed `(model * policies + policy) * metrics + metric`.
    scores: Vec<f64>,
}

impl ScoreTable {
    pub fn new(
        models: Vec<String>,
        policies: Vec<InferencePolicy>,
        metrics: Vec<MetricId>,
        scores: Vec<f64>,
    ) -> Result<Self, RankError> {
        let expected = models.len() * policies.len() * metrics.len();
        if scores.len() != expected || expected == 0 {
            return Err(RankError::IncompleteTable(format!(
                "{} scores for {} cells",
                scores.len(),
                expected
            )));
        }
        Ok(ScoreTable {
            models,
            policies,
            metrics,
            scores,
        })
    }

    /// Scores every cell of a prediction grid on `metrics`.
    pub fn from_grid(
        grid: &PredictionGrid,
        dataset: &Dataset,
        metrics: &[MetricId],
        weighting: KappaWeighting,
    ) -> Result<Self, RankError> {
        let gold = dataset.gold();
        let mut scores = Vec::with_capacity(grid.models().len() * grid.policies().len() * metrics.len());
        for model in grid.models() {
            for policy in grid.policies() {
                let confusion = Confusion::from_labels(grid.cell_labels(model, policy)?, &gold)?;
                for &metric in metrics {
                    scores.push(confusion.score(metric, weighting)?.value);
                }
            }
        }
        Self::new(grid.models().to_vec(), grid.policies().to_vec(), metrics.to_vec(), scores)
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn policies(&self) -> &[InferencePolicy] {
        &self.policies
    }

    pub fn metrics(&self) -> &[MetricId] {
        &self.metrics
    }

    pub fn get(&self, model: usize, policy: usize, metric: MetricId) -> Option<f64> {
        let k = self.metrics.iter().position(|&m| m == metric)?;
        Some(self.scores[(model * self.policies.len() + policy) * self.metrics.len() + k])
    }

    pub fn score(&self, model: &str, policy: &InferencePolicy, metric: MetricId) -> Option<f64> {
        let m = self.models.iter().position(|x| x == model)?;
        let p = self.policies.iter().position(|x| x == policy)?;
        self.get(m, p, metric)
    }

    /// Applies `f` to every score.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScoreTable {
        ScoreTable {
            scores: self.scores.iter().map(|&x| f(x)).collect(),
            ..self.clone()
        }
    }

    /// Same table with model identifiers replaced through `rename`.
    pub fn relabel(&self, rename: impl Fn(&str) -> String) -> ScoreTable {
        ScoreTable {
            models: self.models.iter().map(|m| rename(m)).collect(),
            ..self.clone()
        }
    }

    fn check_subset(&self, subset: &[MetricId]) -> Result<(), RankError> {
        if subset.is_empty() {
            return Err(RankError::EmptySubset);
        }
        match subset.iter().find(|m| !self.metrics.contains(m)) {
            Some(m) => Err(RankError::IncompleteTable(format!("metric {m}"))),
            None => Ok(()),
        }
    }

    /// Scoring policies over `subset`, inference-policy major.
    pub fn scoring_policies(&self, subset: &[MetricId]) -> Vec<ScoringPolicy> {
        self.policies
            .iter()
            .flat_map(|p| {
                subset.iter().map(move |&metric| ScoringPolicy {
                    policy: p.clone(),
                    metric,
                })
            })
            .collect()
    }

    /// Scores of every model under each scoring policy of `subset`.
    fn columns(&self, subset: &[MetricId]) -> Result<Vec<(ScoringPolicy, Vec<f64>)>, RankError> {
        self.check_subset(subset)?;
        let mut out = Vec::new();
        for (p, policy) in self.policies.iter().enumerate() {
            for &metric in subset {
                let col = (0..self.models.len())
                    .map(|m| self.get(m, p, metric).expect("subset checked"))
                    .collect();
                out.push((
                    ScoringPolicy {
                        policy: policy.clone(),
                        metric,
                    },
                    col,
                ));
            }
        }
        Ok(out)
    }
}

fn win_credit(a: f64, b: f64) -> f64 {
    match a.partial_cmp(&b) {
        Some(Ordering::Greater) => 1.0,
        Some(Ordering::Less) => 0.0,
        _ => 0.5,
    }
}

/// Per-(model pair, scoring policy) win credit of the first model of each
/// pair. Pairs are `(i, j)` with `i < j` in model order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseOutcomes {
    pub models: Vec<String>,
    pub policies: Vec<ScoringPolicy>,
    pub pairs: Vec<(usize, usize)>,
    /// `outcomes[pair][policy]` in {0, 0.5, 1}.
    pub outcomes: Vec<Vec<f64>>,
}

impl PairwiseOutcomes {
    pub fn from_table(table: &ScoreTable, subset: &[MetricId]) -> Result<Self, RankError> {
        let columns = table.columns(subset)?;
        let m = table.models.len();
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
        let outcomes = pairs
            .iter()
            .map(|&(i, j)| columns.iter().map(|(_, col)| win_credit(col[i], col[j])).collect())
            .collect();
        Ok(PairwiseOutcomes {
            models: table.models.clone(),
            policies: columns.into_iter().map(|(sp, _)| sp).collect(),
            pairs,
            outcomes,
        })
    }

    pub fn new(models: Vec<String>, n_policies: usize, outcomes: Vec<Vec<f64>>) -> Result<Self, RankError> {
        let m = models.len();
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
        if outcomes.len() != pairs.len() || outcomes.iter().any(|o| o.len() != n_policies) {
            return Err(RankError::IncompleteTable("pairwise outcomes".into()));
        }
        if let Some(&bad) = outcomes.iter().flatten().find(|&&x| x != 0.0 && x != 0.5 && x != 1.0) {
            return Err(RankError::InvalidOutcome(bad));
        }
        let policies = (0..n_policies)
            .map(|k| ScoringPolicy {
                policy: InferencePolicy::new(format!("P{k}"), "0"),
                metric: MetricId::A1,
            })
            .collect();
        Ok(PairwiseOutcomes {
            models,
            policies,
            pairs,
            outcomes,
        })
    }

    pub fn n_policies(&self) -> usize {
        self.outcomes.first().map_or(self.policies.len(), Vec::len)
    }

    pub fn win_matrix(&self) -> WinMatrix {
        let m = self.models.len();
        let mut wins = vec![vec![0.0; m]; m];
        for (&(i, j), row) in self.pairs.iter().zip(&self.outcomes) {
            let credit: f64 = row.iter().sum();
            wins[i][j] = credit;
            wins[j][i] = row.len() as f64 - credit;
        }
        WinMatrix {
            models: self.models.clone(),
            wins,
            n_policies: self.n_policies() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub models: Vec<String>,
    /// `wins[a][b]`: policies on which `a` beat `b`, ties counted half.
    /// The diagonal is unused and held at zero.
    pub wins: Vec<Vec<f64>>,
    pub n_policies: f64,
}

impl WinMatrix {
    /// Builds a matrix from raw counts, checking conservation.
    pub fn from_counts(models: Vec<String>, wins: Vec<Vec<f64>>, n_policies: f64) -> Result<Self, RankError> {
        let w = WinMatrix {
            models,
            wins,
            n_policies,
        };
        w.check_conservation()?;
        Ok(w)
    }

    pub fn check_conservation(&self) -> Result<(), RankError> {
        let m = self.models.len();
        for a in 0..m {
            for b in a + 1..m {
                if (self.wins[a][b] + self.wins[b][a] - self.n_policies).abs() > 1e-9 {
                    return Err(RankError::Conservation {
                        a: self.models[a].clone(),
                        b: self.models[b].clone(),
                        n_policies: self.n_policies,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn total_wins(&self, a: usize) -> f64 {
        (0..self.len()).filter(|&b| b != a).map(|b| self.wins[a][b]).sum()
    }

    pub fn margin(&self, a: usize, b: usize) -> f64 {
        self.wins[a][b] - self.wins[b][a]
    }

    pub fn beats(&self, a: usize, b: usize) -> bool {
        self.margin(a, b) > 0.0
    }

    fn submatrix(&self, members: &[usize]) -> WinMatrix {
        WinMatrix {
            models: members.iter().map(|&i| self.models[i].clone()).collect(),
            wins: members
                .iter()
                .map(|&a| members.iter().map(|&b| self.wins[a][b]).collect())
                .collect(),
            n_policies: self.n_policies,
        }
    }
}

pub fn win_matrix(table: &ScoreTable, subset: &[MetricId]) -> Result<WinMatrix, RankError> {
    let w = PairwiseOutcomes::from_table(table, subset)?.win_matrix();
    w.check_conservation()?;
    Ok(w)
}

/// Ordered groups of models; models within a group are tied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub groups: Vec<Vec<String>>,
}

impl Ranking {
    /// Strict ranking from an ordered list.
    pub fn strict<S: AsRef<str>>(order: &[S]) -> Self {
        Ranking {
            groups: order.iter().map(|m| vec![m.as_ref().to_string()]).collect(),
        }
    }

    /// Ranks by descending score; scores within `tie_eps` of the previous
    /// group head share its group. Group members are sorted by name.
    pub fn from_scores(models: &[String], scores: &[f64], tie_eps: f64) -> Self {
        let mut order: Vec<usize> = (0..models.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| models[a].cmp(&models[b])));
        let mut groups: Vec<Vec<String>> = Vec::new();
        let mut head = f64::NAN;
        for i in order {
            if !groups.is_empty() && (head - scores[i]).abs() <= tie_eps {
                groups.last_mut().expect("non-empty").push(models[i].clone());
            } else {
                head = scores[i];
                groups.push(vec![models[i].clone()]);
            }
        }
        for g in &mut groups {
            g.sort();
        }
        Ranking { groups }
    }

    pub fn is_strict(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    pub fn models(&self) -> Vec<&str> {
        self.groups.iter().flatten().map(String::as_str).collect()
    }

    pub fn top(&self) -> &[String] {
        self.groups.first().map_or(&[], Vec::as_slice)
    }

    fn positions(&self) -> BTreeMap<&str, usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, members)| members.iter().map(move |m| (m.as_str(), g)))
            .collect()
    }
}

impl fmt::Display for Ranking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.groups.iter().map(|g| g.join(" = ")).collect();
        f.write_str(&parts.join(" > "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtFit {
    /// Natural-log strengths centred to mean zero, in matrix model order.
    pub strengths: Vec<f64>,
    pub ranking: Ranking,
    pub iterations: usize,
    pub converged: bool,
}

/// Reachability closure of the "won at least some credit against" relation.
fn reachability(w: &WinMatrix) -> Vec<Vec<bool>> {
    let m = w.len();
    let mut reach: Vec<Vec<bool>> = (0..m)
        .map(|a| (0..m).map(|b| a == b || w.wins[a][b] > 0.0).collect())
        .collect();
    for k in 0..m {
        for a in 0..m {
            if reach[a][k] {
                for b in 0..m {
                    if reach[k][b] {
                        reach[a][b] = true;
                    }
                }
            }
        }
    }
    reach
}

/// Strongly connected components ordered so that earlier components beat
/// later ones.
fn ordered_components(w: &WinMatrix) -> Vec<Vec<usize>> {
    let m = w.len();
    let reach = reachability(w);
    let mut assigned = vec![false; m];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for a in 0..m {
        if assigned[a] {
            continue;
        }
        let comp: Vec<usize> = (a..m).filter(|&b| reach[a][b] && reach[b][a]).collect();
        for &b in &comp {
            assigned[b] = true;
        }
        comps.push(comp);
    }
    // A component reaching more models sits higher.
    comps.sort_by_key(|c| std::cmp::Reverse(reach[c[0]].iter().filter(|&&r| r).count()));
    comps
}

fn fit_mm(w: &WinMatrix) -> (Vec<f64>, usize, bool) {
    let m = w.len();
    let mut p = vec![1.0; m];
    let totals: Vec<f64> = (0..m).map(|i| w.total_wins(i)).collect();
    for it in 1..=BT_MAX_ITERATIONS {
        let mut next = vec![0.0; m];
        for i in 0..m {
            let denom: f64 = (0..m)
                .filter(|&j| j != i)
                .map(|j| (w.wins[i][j] + w.wins[j][i]) / (p[i] + p[j]))
                .sum();
            next[i] = totals[i] / denom;
        }
        let log_mean = next.iter().map(|x| x.ln()).sum::<f64>() / m as f64;
        let scale = log_mean.exp();
        for x in &mut next {
            *x /= scale;
        }
        let change = next
            .iter()
            .zip(&p)
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max);
        p = next;
        if change < BT_TOLERANCE {
            return (p.iter().map(|x| x.ln()).collect(), it, true);
        }
    }
    (p.iter().map(|x| x.ln()).collect(), BT_MAX_ITERATIONS, false)
}

fn centre(v: &mut [f64]) {
    let mu = mean(v);
    for x in v {
        *x -= mu;
    }
}

/// Bradley–Terry maximum-likelihood strengths by minorization–maximization.
pub fn bradley_terry(w: &WinMatrix) -> Result<BtFit, RankError> {
    if w.len() < 2 {
        return Ok(BtFit {
            strengths: vec![0.0; w.len()],
            ranking: Ranking::strict(&w.models),
            iterations: 0,
            converged: true,
        });
    }
    let comps = ordered_components(w);
    if comps.len() > 1 {
        return Err(RankError::DegenerateComparisons {
            components: comps
                .iter()
                .map(|c| c.iter().map(|&i| w.models[i].clone()).collect())
                .collect(),
        });
    }
    let (mut strengths, iterations, converged) = fit_mm(w);
    centre(&mut strengths);
    let ranking = Ranking::from_scores(&w.models, &strengths, 1e-9);
    Ok(BtFit {
        strengths,
        ranking,
        iterations,
        converged,
    })
}

/// Bradley–Terry ranking that stays defined when the MLE does not exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtRanking {
    pub ranking: Ranking,
    /// Finite strengths when the MLE exists.
    pub strengths: Option<Vec<f64>>,
    /// Components of the comparison graph, strongest first, when degenerate.
    pub components: Option<Vec<Vec<String>>>,
}

/// Ranks by the limit of the Bradley–Terry fit: components of the
/// comparison graph in dominance order, each ranked by its own fit.
pub fn bt_ranking(w: &WinMatrix) -> BtRanking {
    match bradley_terry(w) {
        Ok(fit) => BtRanking {
            ranking: fit.ranking,
            strengths: Some(fit.strengths),
            components: None,
        },
        Err(RankError::DegenerateComparisons { components }) => {
            let mut groups = Vec::new();
            for comp in ordered_components(w) {
                let sub = w.submatrix(&comp);
                let fit = bradley_terry(&sub).expect("component is strongly connected");
                groups.extend(fit.ranking.groups);
            }
            BtRanking {
                ranking: Ranking { groups },
                strengths: None,
                components: Some(components),
            }
        }
        Err(other) => unreachable!("bradley_terry only fails on degeneracy: {other}"),
    }
}

/// Per-model Borda totals over the scoring policies of `subset`.
pub fn borda_scores(table: &ScoreTable, subset: &[MetricId]) -> Result<Vec<f64>, RankError> {
    let columns = table.columns(subset)?;
    let m = table.models.len();
    let mut totals = vec![0.0; m];
    for (_, col) in &columns {
        for a in 0..m {
            let below = col.iter().filter(|&&s| s < col[a]).count() as f64;
            let tied = col.iter().filter(|&&s| s == col[a]).count() as f64 - 1.0;
            totals[a] += below + tied / 2.0;
        }
    }
    Ok(totals)
}

pub fn borda(table: &ScoreTable, subset: &[MetricId]) -> Result<Ranking, RankError> {
    let totals = borda_scores(table, subset)?;
    Ok(Ranking::from_scores(&table.models, &totals, 0.0))
}

fn topological_groups(models: &[String], locked: &[Vec<bool>]) -> Ranking {
    let m = models.len();
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut groups = Vec::new();
    while !remaining.is_empty() {
        let sources: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&b| !remaining.iter().any(|&a| locked[a][b]))
            .collect();
        let mut group: Vec<String> = sources.iter().map(|&i| models[i].clone()).collect();
        group.sort();
        groups.push(group);
        remaining.retain(|i| !sources.contains(i));
    }
    Ranking { groups }
}

fn has_path(locked: &[Vec<bool>], from: usize, to: usize) -> bool {
    let mut seen = vec![false; locked.len()];
    let mut stack = vec![from];
    while let Some(a) = stack.pop() {
        if a == to {
            return true;
        }
        if std::mem::replace(&mut seen[a], true) {
            continue;
        }
        stack.extend((0..locked.len()).filter(|&b| locked[a][b] && !seen[b]));
    }
    false
}

/// Tideman's Ranked Pairs. Edges are taken by descending margin, then
/// descending winner wins, then declared (winner, loser) position, so the
/// result never depends on model names.
pub fn ranked_pairs(w: &WinMatrix) -> Ranking {
    let m = w.len();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for a in 0..m {
        for b in 0..m {
            if a != b && w.margin(a, b) > 0.0 {
                edges.push((a, b));
            }
        }
    }
    edges.sort_by(|&(a, b), &(c, d)| {
        w.margin(c, d)
            .total_cmp(&w.margin(a, b))
            .then(w.wins[c][d].total_cmp(&w.wins[a][b]))
            .then((a, b).cmp(&(c, d)))
    });
    let mut locked = vec![vec![false; m]; m];
    for (winner, loser) in edges {
        if !has_path(&locked, loser, winner) {
            locked[winner][loser] = true;
        }
    }
    topological_groups(&w.models, &locked)
}

/// Copeland scores: head-to-head majority wins minus losses.
pub fn copeland_scores(w: &WinMatrix) -> Vec<f64> {
    (0..w.len())
        .map(|a| {
            (0..w.len())
                .filter(|&b| b != a)
                .map(|b| match w.margin(a, b).partial_cmp(&0.0) {
                    Some(Ordering::Greater) => 1.0,
                    Some(Ordering::Less) => -1.0,
                    _ => 0.0,
                })
                .sum()
        })
        .collect()
}

pub fn copeland(w: &WinMatrix) -> Ranking {
    Ranking::from_scores(&w.models, &copeland_scores(w), 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondorcetResult {
    pub winner: Option<String>,
    /// Each cycle `[a, b, c]` means a beats b, b beats c, c beats a.
    pub cycles: Vec<[String; 3]>,
}

pub fn condorcet(w: &WinMatrix) -> CondorcetResult {
    let m = w.len();
    let winner = (0..m)
        .find(|&a| (0..m).all(|b| b == a || w.beats(a, b)))
        .map(|a| w.models[a].clone());
    let mut cycles = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            for c in b + 1..m {
                let name = |i: usize| w.models[i].clone();
                if w.beats(a, b) && w.beats(b, c) && w.beats(c, a) {
                    cycles.push([name(a), name(b), name(c)]);
                } else if w.beats(a, c) && w.beats(c, b) && w.beats(b, a) {
                    cycles.push([name(a), name(c), name(b)]);
                }
            }
        }
    }
    CondorcetResult { winner, cycles }
}

/// Normalized Kendall τ distance; a pair tied in exactly one ranking counts
/// half.
pub fn kendall_tau_distance(r1: &Ranking, r2: &Ranking) -> Result<f64, RankError> {
    let p1 = r1.positions();
    let p2 = r2.positions();
    if p1.len() != r1.models().len()
        || p2.len() != r2.models().len()
        || p1.keys().ne(p2.keys())
    {
        return Err(RankError::ModelSetMismatch);
    }
    let models: Vec<&str> = p1.keys().copied().collect();
    let m = models.len();
    if m < 2 {
        return Ok(0.0);
    }
    let mut discordant = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let s1 = p1[models[i]].cmp(&p1[models[j]]);
            let s2 = p2[models[i]].cmp(&p2[models[j]]);
            discordant += match (s1, s2) {
                _ if s1 == s2 => 0.0,
                (Ordering::Equal, _) | (_, Ordering::Equal) => 0.5,
                _ => 1.0,
            };
        }
    }
    Ok(discordant / (m * (m - 1) / 2) as f64)
}

/// Ranking of models under each scoring policy of `subset`.
pub fn per_policy_rankings(table: &ScoreTable, subset: &[MetricId]) -> Result<Vec<(ScoringPolicy, Ranking)>, RankError> {
    Ok(table
        .columns(subset)?
        .into_iter()
        .map(|(sp, col)| {
            let r = Ranking::from_scores(&table.models, &col, 0.0);
            (sp, r)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Rubric,
    Metric,
    Temperature,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Rubric, Dimension::Metric, Dimension::Temperature];

    fn differs_only_here(self, a: &ScoringPolicy, b: &ScoringPolicy) -> bool {
        let rubric = a.policy.rubric != b.policy.rubric;
        let temp = a.policy.temperature != b.policy.temperature;
        let metric = a.metric != b.metric;
        match self {
            Dimension::Rubric => rubric && !temp && !metric,
            Dimension::Metric => metric && !rubric && !temp,
            Dimension::Temperature => temp && !rubric && !metric,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dimension::Rubric => "rubric",
            Dimension::Metric => "metric",
            Dimension::Temperature => "temperature",
        };
        f.write_str(s)
    }
}

/// Mean Kendall distance over unordered scoring-policy pairs that differ
/// only along `dimension`.
pub fn dimension_sensitivity(rankings: &[(ScoringPolicy, Ranking)], dimension: Dimension) -> Result<f64, RankError> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, (pa, ra)) in rankings.iter().enumerate() {
        for (pb, rb) in &rankings[i + 1..] {
            if dimension.differs_only_here(pa, pb) {
                total += kendall_tau_distance(ra, rb)?;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(RankError::NoEligiblePairs(dimension));
    }
    Ok(total / pairs as f64)
}

/// Sum over model pairs of the share of policies whose outcome runs against
/// `reference`. Pairs tied in the reference contribute one half.
pub fn inversion_statistic(outcomes: &PairwiseOutcomes, reference: &Ranking) -> f64 {
    let pos = reference.positions();
    outcomes
        .pairs
        .iter()
        .zip(&outcomes.outcomes)
        .map(|(&(i, j), row)| {
            let rate_first_wins = row.iter().sum::<f64>() / row.len() as f64;
            match pos[outcomes.models[i].as_str()].cmp(&pos[outcomes.models[j].as_str()]) {
                Ordering::Less => 1.0 - rate_first_wins,
                Ordering::Greater => rate_first_wins,
                Ordering::Equal => 0.5,
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationT {
    pub t_observed: f64,
    pub null_mean: f64,
    pub null_q025: f64,
    pub null_q975: f64,
    pub p_two_sided: f64,
    pub tail: Tail,
    pub replicates: usize,
    pub reference: Ranking,
}

/// Permutation test of policy consistency.
///
/// Each null replicate exchanges the two models of every pair independently
/// per policy with probability one half (credit `x` becomes `1 - x`), then
/// refits the Bradley–Terry reference ranking on the permuted indicators
/// before measuring inversion rates. The two-sided p counts null draws at
/// least as far from the null mean as the observed statistic, with
/// Phipson–Smyth `(r + 1) / (B + 1)`.
pub fn permutation_t(outcomes: &PairwiseOutcomes, plan: &ResamplePlan) -> Result<PermutationT, RankError> {
    if plan.replicates == 0 {
        return Err(ResampleError::NoReplicates.into());
    }
    if plan.scheme != ResampleScheme::Permutation {
        return Err(ResampleError::SchemeMismatch {
            expected: ResampleScheme::Permutation,
            actual: plan.scheme,
        }
        .into());
    }
    let reference = bt_ranking(&outcomes.win_matrix()).ranking;
    let t_observed = inversion_statistic(outcomes, &reference);

    let null: Vec<f64> = (0..plan.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(plan.seed, plan.stream, r as u64);
            let mut permuted = outcomes.clone();
            for row in &mut permuted.outcomes {
                let mut bits = 0u64;
                for (k, x) in row.iter_mut().enumerate() {
                    if k % 64 == 0 {
                        bits = rng.next_u64();
                    }
                    if (bits >> (k % 64)) & 1 == 1 {
                        *x = 1.0 - *x;
                    }
                }
            }
            let reference = bt_ranking(&permuted.win_matrix()).ranking;
            inversion_statistic(&permuted, &reference)
        })
        .collect();

    let null_mean = mean(&null);
    let sorted = sorted_copy(&null);
    let observed_gap = (t_observed - null_mean).abs();
    let extreme = null
        .iter()
        .filter(|&&t| (t - null_mean).abs() >= observed_gap - 1e-12)
        .count();
    Ok(PermutationT {
        t_observed,
        null_mean,
        null_q025: percentile_sorted(&sorted, 0.025),
        null_q975: percentile_sorted(&sorted, 0.975),
        p_two_sided: (extreme as f64 + 1.0) / (plan.replicates as f64 + 1.0),
        tail: if t_observed <= null_mean { Tail::Lower } else { Tail::Upper },
        replicates: plan.replicates,
        reference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    BradleyTerry,
    Borda,
    RankedPairs,
    Copeland,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [
        Aggregator::BradleyTerry,
        Aggregator::Borda,
        Aggregator::RankedPairs,
        Aggregator::Copeland,
    ];

    pub fn short(self) -> &'static str {
        match self {
            Aggregator::BradleyTerry => "BT",
            Aggregator::Borda => "Borda",
            Aggregator::RankedPairs => "RP",
            Aggregator::Copeland => "Copeland",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateOutcome {
    pub aggregator: Aggregator,
    pub ranking: Ranking,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strengths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn aggregate(aggregator: Aggregator, table: &ScoreTable, subset: &[MetricId]) -> Result<AggregateOutcome, RankError> {
    let w = win_matrix(table, subset)?;
    let mut out = AggregateOutcome {
        aggregator,
        ranking: Ranking { groups: vec![] },
        strengths: None,
        note: None,
    };
    match aggregator {
        Aggregator::BradleyTerry => {
            let bt = bt_ranking(&w);
            out.ranking = bt.ranking;
            out.strengths = bt.strengths;
            if let Some(components) = bt.components {
                out.note = Some(format!(
                    "MLE does not exist (comparison graph components {components:?}); ranked by component order"
                ));
            }
        }
        Aggregator::Borda => out.ranking = borda(table, subset)?,
        Aggregator::RankedPairs => out.ranking = ranked_pairs(&w),
        Aggregator::Copeland => out.ranking = copeland(&w),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn matrix(models: &[&str], wins: Vec<Vec<f64>>, n: f64) -> WinMatrix {
        WinMatrix::from_counts(names(models), wins, n).unwrap()
    }

    /// One policy per column; `cols[p][m]` is the score of model m.
    fn table(models: &[&str], cols: &[Vec<f64>]) -> ScoreTable {
        let policies: Vec<InferencePolicy> =
            (0..cols.len()).map(|p| InferencePolicy::new(format!("R{p}"), "0.0")).collect();
        let mut scores = Vec::new();
        for m in 0..models.len() {
            for col in cols {
                scores.push(col[m]);
            }
        }
        ScoreTable::new(names(models), policies, vec![MetricId::A1], scores).unwrap()
    }

    #[test]
    fn n_policies_for_clean_subset() {
        let models = names(&["a", "b"]);
        let policies: Vec<InferencePolicy> = ["R1", "R2", "R3", "R4", "R5"]
            .iter()
            .flat_map(|r| ["0.0", "0.3", "0.7"].iter().map(move |t| InferencePolicy::new(*r, *t)))
            .collect();
        let metrics = vec![MetricId::A1, MetricId::A2, MetricId::A4];
        let scores = vec![0.5; 2 * 15 * 3];
        let t = ScoreTable::new(models, policies, metrics.clone(), scores).unwrap();
        let w = win_matrix(&t, &metrics).unwrap();
        assert_eq!(w.n_policies, 45.0);
        assert_eq!(w.wins[0][1], 22.5);
    }

    #[test]
    fn win_matrix_two_policies() {
        let t = table(&["a", "b"], &[vec![0.9, 0.1], vec![0.8, 0.2]]);
        let w = win_matrix(&t, &[MetricId::A1]).unwrap();
        assert_eq!(w.wins[0][1], 2.0);
        assert_eq!(w.wins[1][0], 0.0);
        assert!(matches!(
            win_matrix(&t, &[MetricId::A2]),
            Err(RankError::IncompleteTable(_))
        ));
        assert_eq!(win_matrix(&t, &[]), Err(RankError::EmptySubset));
    }

    #[test]
    fn conservation_violation_detected() {
        let err = WinMatrix::from_counts(names(&["a", "b"]), vec![vec![0.0, 2.0], vec![2.0, 0.0]], 3.0);
        assert!(matches!(err, Err(RankError::Conservation { .. })));
    }

    #[test]
    fn bt_all_ties_gives_zero_strengths() {
        let w = matrix(&["a", "b", "c"], vec![vec![0.0, 2.0, 2.0], vec![2.0, 0.0, 2.0], vec![2.0, 2.0, 0.0]], 4.0);
        let fit = bradley_terry(&w).unwrap();
        assert!(fit.strengths.iter().all(|s| s.abs() < 1e-12));
        assert_eq!(fit.ranking.groups.len(), 1);
    }

    #[test]
    fn bt_three_model_closed_form() {
        // a beats b 3:1 and c 3:1, b and c split 2:2. The score equations
        // W_i = Σ_j n·p_i/(p_i+p_j) hold at p = (3, 1, 1).
        let w = matrix(
            &["a", "b", "c"],
            vec![vec![0.0, 3.0, 3.0], vec![1.0, 0.0, 2.0], vec![1.0, 2.0, 0.0]],
            4.0,
        );
        let p = [3.0f64, 1.0, 1.0];
        for i in 0..3 {
            let expect: f64 = (0..3).filter(|&j| j != i).map(|j| 4.0 * p[i] / (p[i] + p[j])).sum();
            assert!((w.total_wins(i) - expect).abs() < 1e-12);
        }
        let fit = bradley_terry(&w).unwrap();
        assert!(fit.converged);
        assert!((fit.strengths[0] - fit.strengths[1] - 3f64.ln()).abs() < 1e-8);
        assert!((fit.strengths[1] - fit.strengths[2]).abs() < 1e-8);
        assert!(fit.strengths.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn bt_degenerate_is_reported() {
        let w = matrix(&["a", "b"], vec![vec![0.0, 3.0], vec![0.0, 0.0]], 3.0);
        match bradley_terry(&w) {
            Err(RankError::DegenerateComparisons { components }) => {
                assert_eq!(components, vec![names(&["a"]), names(&["b"])]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let limit = bt_ranking(&w);
        assert_eq!(limit.ranking, Ranking::strict(&["a", "b"]));
        assert!(limit.strengths.is_none());
    }

    #[test]
    fn borda_cases() {
        let t = table(&["a", "b", "c"], &[vec![0.3, 0.2, 0.1]]);
        assert_eq!(borda(&t, &[MetricId::A1]).unwrap(), Ranking::strict(&["a", "b", "c"]));
        let t = table(&["a", "b", "c"], &[vec![0.3, 0.2, 0.1], vec![0.1, 0.2, 0.3]]);
        assert_eq!(borda(&t, &[MetricId::A1]).unwrap().groups.len(), 1);
        // Hand case: p1 a>b>c (2,1,0); p2 b>a=c (0.5,2,0.5); p3 c>b>a (0,1,2)
        let t = table(
            &["a", "b", "c"],
            &[vec![0.9, 0.5, 0.1], vec![0.4, 0.8, 0.4], vec![0.1, 0.2, 0.3]],
        );
        assert_eq!(borda_scores(&t, &[MetricId::A1]).unwrap(), vec![2.5, 4.0, 2.5]);
        let r = borda(&t, &[MetricId::A1]).unwrap();
        assert_eq!(r.groups, vec![names(&["b"]), names(&["a", "c"])]);
    }

    fn rock_paper_scissors() -> WinMatrix {
        // a beats b 2:1, b beats c 2:1, c beats a 2:1
        matrix(
            &["a", "b", "c"],
            vec![vec![0.0, 2.0, 1.0], vec![1.0, 0.0, 2.0], vec![2.0, 1.0, 0.0]],
            3.0,
        )
    }

    #[test]
    fn ranked_pairs_cycle_trace() {
        // All margins equal 1 and winner wins equal 2, so lexicographic order
        // decides: (a,b) locked, (b,c) locked, (c,a) would close a cycle.
        assert_eq!(ranked_pairs(&rock_paper_scissors()), Ranking::strict(&["a", "b", "c"]));
    }

    #[test]
    fn copeland_cases() {
        assert_eq!(copeland_scores(&rock_paper_scissors()), vec![0.0, 0.0, 0.0]);
        let dom = matrix(&["a", "b", "c"], vec![vec![0.0, 3.0, 3.0], vec![0.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]], 3.0);
        assert_eq!(copeland_scores(&dom)[0], 2.0);
        let ties = matrix(&["a", "b"], vec![vec![0.0, 1.0], vec![1.0, 0.0]], 2.0);
        assert_eq!(copeland_scores(&ties), vec![0.0, 0.0]);
    }

    #[test]
    fn condorcet_cases() {
        let c = condorcet(&rock_paper_scissors());
        assert_eq!(c.winner, None);
        assert_eq!(c.cycles, vec![[String::from("a"), "b".into(), "c".into()]]);
        let dom = matrix(&["a", "b", "c"], vec![vec![0.0, 3.0, 2.0], vec![0.0, 0.0, 2.0], vec![1.0, 1.0, 0.0]], 3.0);
        let c = condorcet(&dom);
        assert_eq!(c.winner.as_deref(), Some("a"));
        assert!(c.cycles.is_empty());
    }

    #[test]
    fn kendall_cases() {
        let r = Ranking::strict(&["a", "b", "c", "d"]);
        assert_eq!(kendall_tau_distance(&r, &r).unwrap(), 0.0);
        let rev = Ranking::strict(&["d", "c", "b", "a"]);
        assert_eq!(kendall_tau_distance(&r, &rev).unwrap(), 1.0);
        let swap = Ranking::strict(&["b", "a", "c", "d"]);
        assert!((kendall_tau_distance(&r, &swap).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        let tie = Ranking {
            groups: vec![names(&["a", "b"]), names(&["c"]), names(&["d"])],
        };
        assert!((kendall_tau_distance(&r, &tie).unwrap() - 0.5 / 6.0).abs() < 1e-12);
        let other = Ranking::strict(&["a", "b", "c", "e"]);
        assert_eq!(kendall_tau_distance(&r, &other), Err(RankError::ModelSetMismatch));
    }

    #[test]
    fn dimension_sensitivity_isolates_rubric() {
        let sp = |r: &str, t: &str, m: MetricId| ScoringPolicy {
            policy: InferencePolicy::new(r, t),
            metric: m,
        };
        let fwd = Ranking::strict(&["a", "b", "c"]);
        let rev = Ranking::strict(&["c", "b", "a"]);
        let mut rankings = Vec::new();
        for r in ["R1", "R2"] {
            for t in ["0.0", "0.7"] {
                for m in [MetricId::A1, MetricId::A2] {
                    let ranking = if r == "R1" { fwd.clone() } else { rev.clone() };
                    rankings.push((sp(r, t, m), ranking));
                }
            }
        }
        assert_eq!(dimension_sensitivity(&rankings, Dimension::Rubric).unwrap(), 1.0);
        assert_eq!(dimension_sensitivity(&rankings, Dimension::Metric).unwrap(), 0.0);
        assert_eq!(dimension_sensitivity(&rankings, Dimension::Temperature).unwrap(), 0.0);
        assert_eq!(
            dimension_sensitivity(&rankings[..1], Dimension::Rubric),
            Err(RankError::NoEligiblePairs(Dimension::Rubric))
        );
    }

    #[test]
    fn consistent_outcomes_have_zero_t() {
        let outcomes = PairwiseOutcomes::new(names(&["a", "b", "c"]), 12, vec![vec![1.0; 12]; 3]).unwrap();
        let res = permutation_t(&outcomes, &ResamplePlan::permutation(500, 42)).unwrap();
        assert_eq!(res.t_observed, 0.0);
        assert_eq!(res.tail, Tail::Lower);
        assert!(res.null_q025 > 0.0);
        assert!(res.p_two_sided <= 2.0 / 501.0);
    }

    #[test]
    fn invalid_outcomes_rejected() {
        assert_eq!(
            PairwiseOutcomes::new(names(&["a", "b"]), 1, vec![vec![0.3]]),
            Err(RankError::InvalidOutcome(0.3))
        );
    }

    #[test]
    fn ranking_display() {
        let r = Ranking {
            groups: vec![names(&["a"]), names(&["b", "c"])],
        };
        assert_eq!(r.to_string(), "a > b = c");
    }
}
