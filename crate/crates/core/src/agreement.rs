//! Rubric sensitivity: per-model label agreement between two rubrics,
//! gold-stratified swap rates, and the independence baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Label};
use crate::grid::{GridError, InferencePolicy, PredictionGrid, Temperature};
use crate::metrics::{IntervalEstimate, IntervalMethod};
use crate::resample::{clustered_bootstrap, ResampleError, ResamplePlan};
use crate::stats::{percentile_sorted, sorted_copy};

/// Strata with fewer gold items than this are flagged as not interpretable.
pub const MIN_INTERPRETABLE_STRATUM: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum AgreementError {
    #[error("marginal sums to {0}, not 1")]
    UnnormalizedMarginal(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DominantSwap {
    pub from: Label,
    pub to: Label,
    pub count: usize,
    /// Another transition had the same count.
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub model: String,
    pub rubric_a: String,
    pub rubric_b: String,
    pub temperature: Temperature,
    pub n: usize,
    pub agree_rate: f64,
    pub ci: IntervalEstimate,
    pub dominant_swap: Option<DominantSwap>,
}

fn percentile_ci(point: f64, values: &[f64], confidence: f64) -> IntervalEstimate {
    let finite: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let alpha = 1.0 - confidence;
    let (lower, upper) = if finite.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let sorted = sorted_copy(&finite);
        (
            percentile_sorted(&sorted, alpha / 2.0),
            percentile_sorted(&sorted, 1.0 - alpha / 2.0),
        )
    };
    IntervalEstimate {
        point,
        lower,
        upper,
        method: IntervalMethod::PercentileBootstrap,
        confidence,
    }
}

/// Most frequent `a → b` transition among disagreeing items; ties go to the
/// smaller source label, then the smaller target.
pub fn dominant_swap(labels_a: &[Label], labels_b: &[Label]) -> Option<DominantSwap> {
    let mut counts: BTreeMap<(Label, Label), usize> = BTreeMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        if a != b {
            *counts.entry((a, b)).or_default() += 1;
        }
    }
    let max = counts.values().copied().max()?;
    let mut at_max = counts.iter().filter(|(_, &c)| c == max);
    let (&(from, to), _) = at_max.next().expect("max exists");
    Some(DominantSwap {
        from,
        to,
        count: max,
        tied: at_max.next().is_some(),
    })
}

pub fn pair_agreement(
    grid: &PredictionGrid,
    model: &str,
    rubric_a: &str,
    rubric_b: &str,
    temperature: &Temperature,
    plan: &ResamplePlan,
) -> Result<AgreementRow, AgreementError> {
    let a = grid.cell_labels(model, &InferencePolicy::new(rubric_a, temperature.as_str()))?;
    let b = grid.cell_labels(model, &InferencePolicy::new(rubric_b, temperature.as_str()))?;
    let same: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x == y) as u8 as f64).collect();
    let boot = clustered_bootstrap(
        |idx: &[usize]| -> Result<Vec<f64>, AgreementError> {
            Ok(vec![idx.iter().map(|&i| same[i]).sum::<f64>() / idx.len() as f64])
        },
        same.len(),
        plan,
    )?;
    Ok(AgreementRow {
        model: model.to_string(),
        rubric_a: rubric_a.to_string(),
        rubric_b: rubric_b.to_string(),
        temperature: temperature.clone(),
        n: same.len(),
        agree_rate: boot.point[0],
        ci: boot.interval(0),
        dominant_swap: dominant_swap(a, b),
    })
}

/// Agreement for every model and unordered rubric pair at one temperature.
pub fn agreement_table(
    grid: &PredictionGrid,
    temperature: &Temperature,
    plan: &ResamplePlan,
) -> Result<Vec<AgreementRow>, AgreementError> {
    let rubrics = grid.rubrics();
    let mut rows = Vec::new();
    for model in grid.models() {
        for (i, ra) in rubrics.iter().enumerate() {
            for rb in &rubrics[i + 1..] {
                rows.push(pair_agreement(grid, model, ra, rb, temperature, plan)?);
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapStratum {
    pub gold: Label,
    pub n_items: usize,
    pub n_pairs: usize,
    pub swaps: usize,
    pub rate: f64,
    pub ci: IntervalEstimate,
    pub interpretable: bool,
}

/// Swap rates between two rubrics grouped by gold class and pooled over
/// models. Bootstrap replicates resample items, carrying every model's pair
/// for that item along.
pub fn swap_stratification(
    grid: &PredictionGrid,
    rubric_a: &str,
    rubric_b: &str,
    temperature: &Temperature,
    dataset: &Dataset,
    plan: &ResamplePlan,
) -> Result<Vec<SwapStratum>, AgreementError> {
    let pa = InferencePolicy::new(rubric_a, temperature.as_str());
    let pb = InferencePolicy::new(rubric_b, temperature.as_str());
    let gold = dataset.gold();
    // Per item: number of models whose label differs between the rubrics.
    let mut swaps_per_item = vec![0usize; gold.len()];
    for model in grid.models() {
        let a = grid.cell_labels(model, &pa)?;
        let b = grid.cell_labels(model, &pb)?;
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            if x != y {
                swaps_per_item[i] += 1;
            }
        }
    }
    let n_models = grid.models().len();
    let classes: Vec<Label> = Label::ALL.into_iter().filter(|l| gold.contains(l)).collect();
    let rates = |idx: &[usize]| -> Vec<f64> {
        let mut items = [0usize; 5];
        let mut swaps = [0usize; 5];
        for &i in idx {
            items[gold[i].index()] += 1;
            swaps[gold[i].index()] += swaps_per_item[i];
        }
        classes
            .iter()
            .map(|c| {
                let k = c.index();
                if items[k] == 0 {
                    f64::NAN
                } else {
                    swaps[k] as f64 / (items[k] * n_models) as f64
                }
            })
            .collect()
    };
    let boot = clustered_bootstrap(|idx: &[usize]| Ok::<_, AgreementError>(rates(idx)), gold.len(), plan)?;
    Ok(classes
        .iter()
        .enumerate()
        .map(|(k, &class)| {
            let n_items = gold.iter().filter(|&&g| g == class).count();
            let swaps: usize = (0..gold.len()).filter(|&i| gold[i] == class).map(|i| swaps_per_item[i]).sum();
            let n_pairs = n_items * n_models;
            let rate = swaps as f64 / n_pairs as f64;
            SwapStratum {
                gold: class,
                n_items,
                n_pairs,
                swaps,
                rate,
                ci: percentile_ci(rate, &boot.component(k), plan.confidence),
                interpretable: n_items >= MIN_INTERPRETABLE_STRATUM,
            }
        })
        .collect())
}

fn check_marginal(m: &BTreeMap<Label, f64>) -> Result<(), AgreementError> {
    let total: f64 = m.values().sum();
    if (total - 1.0).abs() > 1e-9 || m.values().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(AgreementError::UnnormalizedMarginal(total));
    }
    Ok(())
}

/// Agreement expected if two raters labelled independently with the given
/// marginals.
pub fn chance_agreement(a: &BTreeMap<Label, f64>, b: &BTreeMap<Label, f64>) -> Result<f64, AgreementError> {
    check_marginal(a)?;
    check_marginal(b)?;
    Ok(a.iter().map(|(l, p)| p * b.get(l).copied().unwrap_or(0.0)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ClassDistribution;
    use crate::grid::DeclaredGrid;

    fn l(x: i8) -> Label {
        Label::try_from(x).unwrap()
    }

    fn two_rubric_grid(models: usize, a: Vec<Label>, b: Vec<Label>) -> PredictionGrid {
        let names: Vec<String> = (0..models).map(|i| format!("m{i}")).collect();
        let declared = DeclaredGrid::factorial(names, &["R1".into(), "R2".into()], &["0.0".into()]);
        let cells = (0..models).flat_map(|_| [a.clone(), b.clone()]).collect();
        PredictionGrid::from_cells(&declared, cells).unwrap()
    }

    #[test]
    fn identical_cells_agree_fully() {
        let labels = vec![l(1), l(0), l(-1), l(1)];
        let grid = two_rubric_grid(1, labels.clone(), labels);
        let row = pair_agreement(&grid, "m0", "R1", "R2", &Temperature::new("0.0"), &ResamplePlan::bootstrap(100, 3))
            .unwrap();
        assert_eq!(row.agree_rate, 1.0);
        assert_eq!(row.dominant_swap, None);
    }

    #[test]
    fn every_item_swapped() {
        let grid = two_rubric_grid(1, vec![l(1); 6], vec![l(0); 6]);
        let t = Temperature::new("0.0");
        let plan = ResamplePlan::bootstrap(100, 3);
        let row = pair_agreement(&grid, "m0", "R1", "R2", &t, &plan).unwrap();
        assert_eq!(row.agree_rate, 0.0);
        assert_eq!(
            row.dominant_swap,
            Some(DominantSwap {
                from: l(1),
                to: l(0),
                count: 6,
                tied: false
            })
        );
        let back = pair_agreement(&grid, "m0", "R2", "R1", &t, &plan).unwrap();
        assert_eq!(back.agree_rate, row.agree_rate);
        let s = back.dominant_swap.unwrap();
        assert_eq!((s.from, s.to), (l(0), l(1)));
    }

    #[test]
    fn dominant_swap_tie_prefers_smaller_source() {
        let a = vec![l(1), l(-1), l(0)];
        let b = vec![l(0), l(0), l(0)];
        let s = dominant_swap(&a, &b).unwrap();
        assert_eq!((s.from, s.to, s.count, s.tied), (l(-1), l(0), 1, true));
    }

    #[test]
    fn unknown_cell_propagates() {
        let grid = two_rubric_grid(1, vec![l(1)], vec![l(1)]);
        let err = pair_agreement(&grid, "m0", "R1", "R9", &Temperature::new("0.0"), &ResamplePlan::bootstrap(10, 1));
        assert!(matches!(err, Err(AgreementError::Grid(GridError::UnknownCell { .. }))));
    }

    #[test]
    fn strata_pool_models() {
        let gold = vec![l(-2), l(-2), l(1), l(1), l(1), l(1), l(1), l(0)];
        let dataset = Dataset::from_gold(&gold).unwrap();
        let mut b = gold.clone();
        b[0] = l(-1);
        b[2] = l(0);
        let grid = two_rubric_grid(4, gold.clone(), b);
        let strata = swap_stratification(
            &grid,
            "R1",
            "R2",
            &Temperature::new("0.0"),
            &dataset,
            &ResamplePlan::bootstrap(200, 5),
        )
        .unwrap();
        let minus2 = strata.iter().find(|s| s.gold == l(-2)).unwrap();
        assert_eq!((minus2.n_pairs, minus2.swaps), (8, 4));
        assert!(!minus2.interpretable);
        let plus1 = strata.iter().find(|s| s.gold == l(1)).unwrap();
        assert_eq!((plus1.n_pairs, plus1.swaps, plus1.interpretable), (20, 4, true));
        assert!((plus1.rate - 0.2).abs() < 1e-12);
        let total: usize = strata.iter().map(|s| s.swaps).sum();
        assert_eq!(total, 8);
    }

    #[test]
    fn no_disagreement_means_zero_strata() {
        let gold = vec![l(0), l(1), l(2)];
        let dataset = Dataset::from_gold(&gold).unwrap();
        let grid = two_rubric_grid(2, gold.clone(), gold);
        let strata = swap_stratification(
            &grid,
            "R1",
            "R2",
            &Temperature::new("0.0"),
            &dataset,
            &ResamplePlan::bootstrap(50, 5),
        )
        .unwrap();
        assert!(strata.iter().all(|s| s.rate == 0.0));
    }

    #[test]
    fn chance_agreement_cases() {
        let point: BTreeMap<Label, f64> = [(l(1), 1.0)].into();
        assert_eq!(chance_agreement(&point, &point).unwrap(), 1.0);
        let uniform: BTreeMap<Label, f64> = Label::ALL.iter().map(|&x| (x, 0.2)).collect();
        assert!((chance_agreement(&uniform, &uniform).unwrap() - 0.2).abs() < 1e-12);
        let bad: BTreeMap<Label, f64> = [(l(1), 0.7)].into();
        assert!(matches!(
            chance_agreement(&bad, &point),
            Err(AgreementError::UnnormalizedMarginal(_))
        ));
        let gold: Vec<Label> = [(-2i8, 2usize), (-1, 11), (0, 72), (1, 139), (2, 29)]
            .iter()
            .flat_map(|&(v, c)| std::iter::repeat(l(v)).take(c))
            .collect();
        let p = ClassDistribution::from_labels(&gold).proportions;
        assert!((chance_agreement(&p, &p).unwrap() - 25471.0 / 64009.0).abs() < 1e-12);
    }
}
