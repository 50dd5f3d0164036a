//! Nadaraya-Watson estimate of the class probability, `pi_tilde(x)`, from
//! training data with a Gaussian RBF kernel.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::clamp_prob;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    Silverman,
}

/// Either a fixed positive bandwidth or a data-driven rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Rule(BandwidthRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KernelKind {
    #[default]
    #[serde(rename = "gaussian-rbf")]
    GaussianRbf,
}

/// JSON: `{"bandwidth":"silverman"}` or `{"bandwidth":0.5}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    #[serde(default)]
    pub kernel: KernelKind,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Rule(BandwidthRule::Silverman),
            kernel: KernelKind::GaussianRbf,
        }
    }
}

impl KernelConfig {
    pub fn fixed(h: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(h),
            ..Self::default()
        }
    }

    /// The bandwidth this config yields on `train`.
    pub fn resolve(&self, train: &Dataset) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok(h),
            Bandwidth::Fixed(h) => Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {h}"
            ))),
            Bandwidth::Rule(BandwidthRule::Silverman) => silverman_bandwidth(train),
        }
    }
}

/// `h = s * (4 / ((d + 2) n))^(1 / (d + 4))`, where `s` is the mean of the
/// per-dimension sample standard deviations.
pub fn silverman_bandwidth(train: &Dataset) -> Result<f64> {
    let n = train.len();
    if n < 2 {
        return Err(Error::InsufficientData(
            "bandwidth rule needs at least 2 instances".into(),
        ));
    }
    let d = train.dim();
    let nf = n as f64;
    let mut sd_sum = 0.0;
    for j in 0..d {
        let mean = train.iter().map(|i| i.features[j]).sum::<f64>() / nf;
        let ss: f64 = train.iter().map(|i| (i.features[j] - mean).powi(2)).sum();
        sd_sum += (ss / (nf - 1.0)).sqrt();
    }
    let sd = sd_sum / d as f64;
    if sd <= 0.0 || !sd.is_finite() {
        return Err(Error::DegenerateDesign);
    }
    let df = d as f64;
    Ok(sd * (4.0 / ((df + 2.0) * nf)).powf(1.0 / (df + 4.0)))
}

/// A kernel estimator bound to one training set and one positive label.
#[derive(Debug, Clone)]
pub struct KernelEstimator {
    points: Vec<f64>,
    positive: Vec<bool>,
    dim: usize,
    bandwidth: f64,
    global_rate: f64,
}

impl KernelEstimator {
    /// Estimator of `P(y = 1 | x)`.
    pub fn fit(train: &Dataset, cfg: &KernelConfig) -> Result<Self> {
        Self::fit_for_label(train, 1, cfg)
    }

    /// Estimator of `P(y = label | x)`.
    pub fn fit_for_label(train: &Dataset, label: u32, cfg: &KernelConfig) -> Result<Self> {
        train.ensure_non_empty()?;
        let bandwidth = cfg.resolve(train)?;
        let positive: Vec<bool> = train.labels().map(|l| l == label).collect();
        let global_rate =
            positive.iter().filter(|&&p| p).count() as f64 / positive.len() as f64;
        Ok(Self {
            points: train.iter().flat_map(|i| i.features.iter().copied()).collect(),
            positive,
            dim: train.dim(),
            bandwidth,
            global_rate,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Kernel-weighted positive fraction at `x`, clamped. Falls back to the
    /// global positive fraction when every weight underflows.
    pub fn estimate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let scale = -0.5 / (self.bandwidth * self.bandwidth);
        let mut num = 0.0;
        let mut den = 0.0;
        for (point, &pos) in self.points.chunks_exact(self.dim).zip(&self.positive) {
            let d2: f64 = point.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = (d2 * scale).exp();
            den += w;
            if pos {
                num += w;
            }
        }
        let raw = if den > 0.0 { num / den } else { self.global_rate };
        Ok(clamp_prob(raw))
    }

    pub fn estimate_all(&self, ds: &Dataset) -> Result<Vec<f64>> {
        ds.iter().map(|i| self.estimate(&i.features)).collect()
    }
}

/// One-shot `pi_tilde(x)` from `train`.
pub fn estimate_pi_tilde(train: &Dataset, x: &[f64], cfg: &KernelConfig) -> Result<f64> {
    KernelEstimator::fit(train, cfg)?.estimate(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledInstance;
    use crate::model::PROB_EPS;
    use proptest::prelude::*;

    fn ds(points: &[(Vec<f64>, u32)]) -> Dataset {
        Dataset::from_instances(
            points
                .iter()
                .map(|(x, y)| LabeledInstance::new(x.clone(), *y))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_positive_point_clamps_to_one() {
        let train = ds(&[(vec![0.3], 1)]);
        let p = estimate_pi_tilde(&train, &[5.0], &KernelConfig::fixed(1.0)).unwrap();
        assert_eq!(p, 1.0 - PROB_EPS);
    }

    #[test]
    fn equidistant_query_is_half() {
        let train = ds(&[(vec![-1.0], 0), (vec![1.0], 1)]);
        let p = estimate_pi_tilde(&train, &[0.0], &KernelConfig::fixed(0.7)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn underflow_falls_back_to_global_rate() {
        let train = ds(&[(vec![0.0], 0), (vec![0.1], 1), (vec![0.2], 1)]);
        let p = estimate_pi_tilde(&train, &[1e6], &KernelConfig::fixed(0.01)).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_bandwidth_gives_global_rate() {
        let train = ds(&[
            (vec![0.0, 1.0], 0),
            (vec![3.0, -1.0], 1),
            (vec![-2.0, 0.5], 1),
            (vec![1.0, 1.0], 0),
            (vec![0.5, 4.0], 1),
        ]);
        let est = KernelEstimator::fit(&train, &KernelConfig::fixed(1e6)).unwrap();
        for x in [[0.0, 0.0], [10.0, -3.0], [-5.0, 2.0]] {
            assert!((est.estimate(&x).unwrap() - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn silverman_reference_value() {
        // 100 points with sample standard deviation exactly 1
        let raw: Vec<f64> = (0..100).map(f64::from).collect();
        let mean = raw.iter().sum::<f64>() / 100.0;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        let pts: Vec<(Vec<f64>, u32)> = raw.iter().map(|v| (vec![(v - mean) / sd], 0)).collect();
        let h = silverman_bandwidth(&ds(&pts)).unwrap();
        let oracle = (4.0f64 / 300.0).powf(0.2);
        assert!((h - oracle).abs() < 1e-12);
        assert!((h - 0.42168).abs() < 1e-5);
    }

    #[test]
    fn silverman_rejects_constant_design() {
        let train = ds(&[(vec![1.0, 2.0], 0), (vec![1.0, 2.0], 1), (vec![1.0, 2.0], 1)]);
        assert!(matches!(silverman_bandwidth(&train), Err(Error::DegenerateDesign)));
        assert!(silverman_bandwidth(&ds(&[(vec![1.0], 0)])).is_err());
    }

    #[test]
    fn silverman_is_scale_homogeneous() {
        let pts: Vec<(Vec<f64>, u32)> =
            (0..30).map(|i| (vec![f64::from(i).sin(), f64::from(i * i % 7)], 0)).collect();
        let scaled: Vec<(Vec<f64>, u32)> =
            pts.iter().map(|(x, y)| (x.iter().map(|v| v * 3.5).collect(), *y)).collect();
        let h = silverman_bandwidth(&ds(&pts)).unwrap();
        let hs = silverman_bandwidth(&ds(&scaled)).unwrap();
        assert!((hs - 3.5 * h).abs() < 1e-12);
    }

    #[test]
    fn config_json_forms() {
        let a: KernelConfig = serde_json::from_str(r#"{"bandwidth":"silverman"}"#).unwrap();
        assert_eq!(a, KernelConfig::default());
        let b: KernelConfig = serde_json::from_str(r#"{"bandwidth":0.5}"#).unwrap();
        assert_eq!(b, KernelConfig::fixed(0.5));
        assert!(KernelConfig::fixed(-1.0).resolve(&ds(&[(vec![0.0], 0)])).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let train = ds(&[(vec![0.0], 0), (vec![1.0], 1)]);
        assert!(estimate_pi_tilde(&train, &[0.0, 0.0], &KernelConfig::fixed(1.0)).is_err());
    }

    proptest! {
        #[test]
        fn invariant_to_reordering(
            pts in prop::collection::vec((-3.0f64..3.0, 0u32..2), 2..30),
            q in -3.0f64..3.0,
            h in 0.1f64..3.0,
        ) {
            let train: Vec<(Vec<f64>, u32)> = pts.iter().map(|&(x, y)| (vec![x], y)).collect();
            let mut rev = train.clone();
            rev.reverse();
            let cfg = KernelConfig::fixed(h);
            let a = estimate_pi_tilde(&ds(&train), &[q], &cfg).unwrap();
            let b = estimate_pi_tilde(&ds(&rev), &[q], &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a > 0.0 && a < 1.0);
        }
    }
}
