//! Split-conformal machinery in logit space.
//!
//! Conformity scores are `R_i = logit(ref(x_i)) - logit(p_n(x_i))` over the
//! calibration set, where `ref` is the kernel estimate `pi_tilde` (or the
//! true probability in oracle mode). An interval for a new point is
//! `[expit(logit p_n(x) + q_lo), expit(logit p_n(x) + q_up)]` with `q_lo` and
//! `q_up` taken as order statistics of the scores.
//!
//! # Quantile rule
//!
//! With `m` scores and the floor function `[.]`, the lower end is the
//! `([alpha (m + 1) / 2] - 1)`-th smallest score and the upper end the
//! `[(1 - alpha / 2)(m + 1)]`-th smallest (1-based). The lower index is one
//! rank more conservative than the common `ceil` convention. Indices below
//! 1 map to `-inf` and above `m` to `+inf`, so an interval can degrade to
//! `[0, 1]` but never fails.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_alpha, Error, Result};
use crate::kernel::{KernelConfig, KernelEstimator};
use crate::model::{expit, logit, ProbabilityScorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantileSide {
    Lower,
    Upper,
}

fn floor_guarded(x: f64) -> i64 {
    // products like 0.95 * 20 land a hair under the integer in f64
    (x + 1e-9 * x.abs().max(1.0)).floor() as i64
}

/// 1-based rank of the lower order statistic; may be < 1.
pub fn lower_rank(m: usize, alpha: f64) -> i64 {
    floor_guarded(alpha * (m as f64 + 1.0) / 2.0) - 1
}

/// 1-based rank of the upper order statistic; may exceed `m`.
pub fn upper_rank(m: usize, alpha: f64) -> i64 {
    floor_guarded((1.0 - alpha / 2.0) * (m as f64 + 1.0))
}

/// Order-statistic quantile of an ascending list, with `-inf`/`+inf`
/// sentinels when the rank falls outside `[1, m]`.
pub fn order_quantile(sorted: &[f64], alpha: f64, side: QuantileSide) -> f64 {
    let m = sorted.len();
    match side {
        QuantileSide::Lower => {
            let j = lower_rank(m, alpha);
            if j < 1 {
                f64::NEG_INFINITY
            } else {
                sorted[j as usize - 1]
            }
        }
        QuantileSide::Upper => {
            let j = upper_rank(m, alpha);
            if j > m as i64 {
                f64::INFINITY
            } else if j < 1 {
                // only reachable for m = 0
                f64::INFINITY
            } else {
                sorted[j as usize - 1]
            }
        }
    }
}

/// `(q_lo, q_up)` for an ascending score pool.
pub fn quantile_pair(sorted: &[f64], alpha: f64) -> (f64, f64) {
    (
        order_quantile(sorted, alpha, QuantileSide::Lower),
        order_quantile(sorted, alpha, QuantileSide::Upper),
    )
}

/// Sorted conformity scores, pooled and per class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformityScoreSet {
    pub by_class: BTreeMap<u32, Vec<f64>>,
    pub pooled: Vec<f64>,
}

impl ConformityScoreSet {
    /// Groups unsorted `scores` by `labels`. Every label in `known` gets an
    /// entry even when it has no scores.
    pub fn from_scores(labels: &[u32], scores: &[f64], known: &[u32]) -> Self {
        let mut by_class: BTreeMap<u32, Vec<f64>> =
            known.iter().map(|&k| (k, Vec::new())).collect();
        for (&label, &s) in labels.iter().zip(scores) {
            by_class.entry(label).or_default().push(s);
        }
        for pool in by_class.values_mut() {
            pool.sort_by(f64::total_cmp);
        }
        let mut pooled = scores.to_vec();
        pooled.sort_by(f64::total_cmp);
        Self { by_class, pooled }
    }

    pub fn class(&self, k: u32) -> Result<&[f64]> {
        self.by_class
            .get(&k)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownLabel(k))
    }
}

/// Per-point scores `logit(reference_i) - logit(predicted_i)`, in input order.
pub fn residuals(reference: &[f64], predicted: &[f64]) -> Vec<f64> {
    reference
        .iter()
        .zip(predicted)
        .map(|(&r, &p)| logit(r) - logit(p))
        .collect()
}

/// What stands in for the unknown class probability in the scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreReference {
    /// Kernel estimate fitted on the training part.
    Kernel(KernelConfig),
    /// The instance's `oracle_prob` (simulation only).
    Oracle,
}

/// Unsorted per-point scores for `calib`, in calibration order.
pub fn calibration_residuals(
    calib: &Dataset,
    scorer: &dyn ProbabilityScorer,
    train: &Dataset,
    reference: &ScoreReference,
) -> Result<Vec<f64>> {
    let reference_probs = match reference {
        ScoreReference::Kernel(cfg) => KernelEstimator::fit(train, cfg)?.estimate_all(calib)?,
        ScoreReference::Oracle => calib.oracle_probs()?,
    };
    Ok(residuals(&reference_probs, &scorer.score_all(calib)?))
}

fn known_labels(calib: &Dataset) -> Vec<u32> {
    let mut known = vec![0, 1];
    known.extend(calib.labels().filter(|&l| l > 1));
    known
}

/// Scores with `pi_tilde` from `train` as the reference.
pub fn compute_scores(
    calib: &Dataset,
    scorer: &dyn ProbabilityScorer,
    train: &Dataset,
    cfg: &KernelConfig,
) -> Result<ConformityScoreSet> {
    calib.ensure_non_empty()?;
    let scores = calibration_residuals(calib, scorer, train, &ScoreReference::Kernel(*cfg))?;
    let labels: Vec<u32> = calib.labels().collect();
    Ok(ConformityScoreSet::from_scores(&labels, &scores, &known_labels(calib)))
}

/// Scores with each calibration point's true probability as the reference.
pub fn compute_oracle_scores(
    calib: &Dataset,
    scorer: &dyn ProbabilityScorer,
) -> Result<ConformityScoreSet> {
    calib.ensure_non_empty()?;
    let scores = residuals(&calib.oracle_probs()?, &scorer.score_all(calib)?);
    let labels: Vec<u32> = calib.labels().collect();
    Ok(ConformityScoreSet::from_scores(&labels, &scores, &known_labels(calib)))
}

/// A confidence interval for one point's class probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndividualInterval {
    pub lo: f64,
    pub up: f64,
    pub class_conditioned_on: Option<u32>,
    pub alpha: f64,
}

impl IndividualInterval {
    pub fn contains(&self, p: f64) -> bool {
        self.lo <= p && p <= self.up
    }

    pub fn length(&self) -> f64 {
        self.up - self.lo
    }
}

/// Bounds `expit(logit(center) + q)` for the pool's quantile pair. A zero
/// shift returns `center` itself rather than its logit round trip.
pub fn shifted_bounds(center: f64, sorted_pool: &[f64], alpha: f64) -> (f64, f64) {
    let (q_lo, q_up) = quantile_pair(sorted_pool, alpha);
    let z = logit(center);
    let shift = |q: f64| if q == 0.0 { center } else { expit(z + q) };
    (shift(q_lo), shift(q_up))
}

/// Marginal interval from the pooled scores.
pub fn prediction_interval(
    x: &[f64],
    scorer: &dyn ProbabilityScorer,
    scores: &ConformityScoreSet,
    alpha: f64,
) -> Result<IndividualInterval> {
    check_alpha(alpha)?;
    let (lo, up) = shifted_bounds(scorer.score(x)?, &scores.pooled, alpha);
    Ok(IndividualInterval {
        lo,
        up,
        class_conditioned_on: None,
        alpha,
    })
}

/// Interval from the scores of calibration points labelled `k` only.
pub fn class_conditional_interval(
    x: &[f64],
    k: u32,
    scorer: &dyn ProbabilityScorer,
    scores: &ConformityScoreSet,
    alpha: f64,
) -> Result<IndividualInterval> {
    check_alpha(alpha)?;
    let pool = scores.class(k)?;
    if pool.is_empty() {
        log::warn!("no calibration scores for class {k}; interval is [0,1]");
    }
    let (lo, up) = shifted_bounds(scorer.score(x)?, pool, alpha);
    Ok(IndividualInterval {
        lo,
        up,
        class_conditioned_on: Some(k),
        alpha,
    })
}
