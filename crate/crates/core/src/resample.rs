//! Clustered paired bootstrap, sign-flip randomization and multiplicity
//! control.
//!
//! Every replicate draws from its own generator keyed by
//! `(seed, stream, replicate)`, so results do not depend on how replicates
//! are scheduled across threads. All item bootstraps share one stream, which
//! makes replicate `r` use the same index multiset in every statistic of an
//! audit run.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{IntervalEstimate, IntervalMethod};
use crate::stats::{percentile_sorted, sorted_copy, std_dev};

/// Stream id shared by every clustered item bootstrap.
pub const ITEM_BOOTSTRAP_STREAM: u64 = 0;
/// Base stream id for sign-flip tests; cells add their index.
pub const SIGNFLIP_STREAM_BASE: u64 = 1 << 32;
/// Base stream id for policy-permutation nulls.
pub const PERMUTATION_STREAM_BASE: u64 = 2 << 32;

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("resample plan needs at least one replicate")]
    NoReplicates,
    #[error("plan scheme {actual:?} cannot drive {expected:?}")]
    SchemeMismatch {
        expected: ResampleScheme,
        actual: ResampleScheme,
    },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot resample zero items")]
    NoItems,
    #[error("difference {0} is not in {{-1, 0, 1}}")]
    InvalidDifference(i8),
    #[error("p-value {0} is outside (0, 1]")]
    InvalidPValue(f64),
    #[error("level {0} must lie in (0, 1)")]
    InvalidLevel(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleScheme {
    ClusteredItemBootstrap,
    SignFlipRandomization,
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub replicates: usize,
    pub seed: u64,
    pub scheme: ResampleScheme,
    pub stream: u64,
    pub confidence: f64,
}

impl ResamplePlan {
    pub fn bootstrap(replicates: usize, seed: u64) -> Self {
        ResamplePlan {
            replicates,
            seed,
            scheme: ResampleScheme::ClusteredItemBootstrap,
            stream: ITEM_BOOTSTRAP_STREAM,
            confidence: 0.95,
        }
    }

    pub fn signflip(replicates: usize, seed: u64) -> Self {
        ResamplePlan {
            scheme: ResampleScheme::SignFlipRandomization,
            stream: SIGNFLIP_STREAM_BASE,
            ..Self::bootstrap(replicates, seed)
        }
    }

    pub fn permutation(replicates: usize, seed: u64) -> Self {
        ResamplePlan {
            scheme: ResampleScheme::Permutation,
            stream: PERMUTATION_STREAM_BASE,
            ..Self::bootstrap(replicates, seed)
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    fn check(&self, expected: ResampleScheme) -> Result<(), ResampleError> {
        if self.replicates == 0 {
            return Err(ResampleError::NoReplicates);
        }
        if self.scheme != expected {
            return Err(ResampleError::SchemeMismatch {
                expected,
                actual: self.scheme,
            });
        }
        Ok(())
    }
}

/// Generator for one replicate; a pure function of its three keys.
pub fn replicate_rng(seed: u64, stream: u64, replicate: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&replicate.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Item indices drawn with replacement for bootstrap replicate `r`.
pub fn bootstrap_indices(n_items: usize, plan: &ResamplePlan, r: usize) -> Vec<usize> {
    let mut rng = replicate_rng(plan.seed, plan.stream, r as u64);
    (0..n_items).map(|_| rng.gen_range(0..n_items)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_two_sided: f64,
    pub replicates: usize,
    pub method_note: String,
}

/// Bootstrap replicates of a vector-valued statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// Statistic on the original (identity) index set.
    pub point: Vec<f64>,
    /// `replicates[r][k]`: component `k` of replicate `r`.
    pub replicates: Vec<Vec<f64>>,
    pub confidence: f64,
}

impl BootstrapResult {
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.replicates.iter().map(|rep| rep[k]).collect()
    }

    pub fn std_error(&self, k: usize) -> f64 {
        std_dev(&self.component(k))
    }

    /// Two-sided percentile interval for component `k`.
    pub fn interval(&self, k: usize) -> IntervalEstimate {
        let sorted = sorted_copy(&self.component(k));
        let alpha = 1.0 - self.confidence;
        IntervalEstimate {
            point: self.point[k],
            lower: percentile_sorted(&sorted, alpha / 2.0),
            upper: percentile_sorted(&sorted, 1.0 - alpha / 2.0),
            method: IntervalMethod::PercentileBootstrap,
            confidence: self.confidence,
        }
    }

    pub fn intervals(&self) -> Vec<IntervalEstimate> {
        (0..self.point.len()).map(|k| self.interval(k)).collect()
    }
}

/// Clustered item bootstrap. `statistic` receives an index multiset and must
/// apply it to every model, policy and metric it reads.
pub fn clustered_bootstrap<F, E>(statistic: F, n_items: usize, plan: &ResamplePlan) -> Result<BootstrapResult, E>
where
    F: Fn(&[usize]) -> Result<Vec<f64>, E> + Sync,
    E: From<ResampleError> + Send,
{
    plan.check(ResampleScheme::ClusteredItemBootstrap)?;
    if n_items == 0 {
        return Err(ResampleError::NoItems.into());
    }
    let identity: Vec<usize> = (0..n_items).collect();
    let point = statistic(&identity)?;
    let replicates = (0..plan.replicates)
        .into_par_iter()
        .map(|r| statistic(&bootstrap_indices(n_items, plan, r)))
        .collect::<Result<Vec<_>, E>>()?;
    Ok(BootstrapResult {
        point,
        replicates,
        confidence: plan.confidence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub delta: f64,
    pub ci: IntervalEstimate,
    pub test: TestResult,
}

/// Bootstrap p-value: twice the share of replicates on the far side of zero
/// from the point estimate, counting zero itself on both sides.
pub fn bootstrap_two_sided_p(replicates: &[f64]) -> f64 {
    let b = replicates.len() as f64;
    let at_or_below = replicates.iter().filter(|&&x| x <= 0.0).count() as f64;
    let at_or_above = replicates.iter().filter(|&&x| x >= 0.0).count() as f64;
    (2.0 * at_or_below.min(at_or_above) / b).clamp(1.0 / b, 1.0)
}

/// Paired accuracy difference `mean(a) - mean(b)` with a clustered bootstrap
/// interval and two-sided bootstrap p-value.
pub fn paired_delta_test(correct_a: &[bool], correct_b: &[bool], plan: &ResamplePlan) -> Result<PairedDelta, ResampleError> {
    if correct_a.len() != correct_b.len() {
        return Err(ResampleError::LengthMismatch(correct_a.len(), correct_b.len()));
    }
    let diff: Vec<f64> = correct_a
        .iter()
        .zip(correct_b)
        .map(|(&a, &b)| a as i32 as f64 - b as i32 as f64)
        .collect();
    let boot = clustered_bootstrap(
        |idx: &[usize]| -> Result<Vec<f64>, ResampleError> {
            Ok(vec![idx.iter().map(|&i| diff[i]).sum::<f64>() / idx.len() as f64])
        },
        diff.len(),
        plan,
    )?;
    let reps = boot.component(0);
    Ok(PairedDelta {
        delta: boot.point[0],
        ci: boot.interval(0),
        test: TestResult {
            statistic: boot.point[0],
            p_two_sided: bootstrap_two_sided_p(&reps),
            replicates: plan.replicates,
            method_note: "clustered paired bootstrap, p = 2·min(F(0), 1 − F(0))".into(),
        },
    })
}

/// Monte-Carlo sign-flip test of `|Σ d_i|` with the Phipson–Smyth estimate
/// `(r + 1) / (B + 1)`.
pub fn signflip_randomization(d: &[i8], plan: &ResamplePlan) -> Result<TestResult, ResampleError> {
    plan.check(ResampleScheme::SignFlipRandomization)?;
    if let Some(&bad) = d.iter().find(|&&x| !(-1..=1).contains(&x)) {
        return Err(ResampleError::InvalidDifference(bad));
    }
    let nonzero: Vec<i8> = d.iter().copied().filter(|&x| x != 0).collect();
    let observed: i64 = nonzero.iter().map(|&x| x as i64).sum::<i64>().abs();
    if nonzero.is_empty() {
        return Ok(TestResult {
            statistic: 0.0,
            p_two_sided: 1.0,
            replicates: plan.replicates,
            method_note: "no discordant items; p set to 1".into(),
        });
    }
    // Pack signs into 64-bit words: bit set = positive difference.
    let k = nonzero.len();
    let words = k.div_ceil(64);
    let mut positive = vec![0u64; words];
    let mut valid = vec![0u64; words];
    for (i, &x) in nonzero.iter().enumerate() {
        valid[i / 64] |= 1 << (i % 64);
        if x > 0 {
            positive[i / 64] |= 1 << (i % 64);
        }
    }
    let exceed: usize = (0..plan.replicates)
        .into_par_iter()
        .filter(|&r| {
            let mut rng = replicate_rng(plan.seed, plan.stream, r as u64);
            let mut pos = 0i64;
            for w in 0..words {
                let flips = rng.next_u64();
                pos += ((positive[w] ^ flips) & valid[w]).count_ones() as i64;
            }
            (2 * pos - k as i64).abs() >= observed
        })
        .count();
    Ok(TestResult {
        statistic: observed as f64,
        p_two_sided: (exceed as f64 + 1.0) / (plan.replicates as f64 + 1.0),
        replicates: plan.replicates,
        method_note: format!("sign-flip randomization over {k} discordant items, Phipson–Smyth (r+1)/(B+1)"),
    })
}

fn check_p_values(p_values: &[f64]) -> Result<(), ResampleError> {
    match p_values.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        Some(&p) => Err(ResampleError::InvalidPValue(p)),
        None => Ok(()),
    }
}

fn check_level(level: f64) -> Result<(), ResampleError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(ResampleError::InvalidLevel(level))
    }
}

fn ascending_order(p_values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p_values.len()).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolmOutcome {
    pub reject: Vec<bool>,
    /// Step threshold `alpha / (m - rank)` applied to each test, in input order.
    pub thresholds: Vec<f64>,
}

impl HolmOutcome {
    pub fn rejections(&self) -> usize {
        self.reject.iter().filter(|&&r| r).count()
    }
}

/// Holm step-down procedure.
pub fn holm_correction(p_values: &[f64], alpha: f64) -> Result<HolmOutcome, ResampleError> {
    check_p_values(p_values)?;
    check_level(alpha)?;
    let m = p_values.len();
    let mut reject = vec![false; m];
    let mut thresholds = vec![0.0; m];
    let mut stopped = false;
    for (rank, &i) in ascending_order(p_values).iter().enumerate() {
        thresholds[i] = alpha / (m - rank) as f64;
        if !stopped && p_values[i] <= thresholds[i] {
            reject[i] = true;
        } else {
            stopped = true;
        }
    }
    Ok(HolmOutcome { reject, thresholds })
}

/// Benjamini–Hochberg step-up procedure.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<Vec<bool>, ResampleError> {
    check_p_values(p_values)?;
    check_level(q)?;
    let m = p_values.len();
    let order = ascending_order(p_values);
    let cutoff = order
        .iter()
        .enumerate()
        .filter(|(rank, &i)| p_values[i] <= (rank + 1) as f64 * q / m as f64)
        .map(|(rank, _)| rank + 1)
        .max()
        .unwrap_or(0);
    let mut reject = vec![false; m];
    for &i in &order[..cutoff] {
        reject[i] = true;
    }
    Ok(reject)
}
