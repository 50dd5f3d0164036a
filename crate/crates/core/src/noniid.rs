//! Localized intervals for covariate-shifted test data.
//!
//! For a test point `x` the residual pool is restricted to the `N`
//! calibration points nearest to `x` that share the conditioning label. If
//! fewer than `min_class_size` such points fall in the neighbourhood, `N`
//! doubles until enough are found or the calibration set is used up.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformal::{calibration_residuals, shifted_bounds, IndividualInterval, ScoreReference};
use crate::data::{DataSplit, Dataset, LabeledInstance};
use crate::error::{check_alpha, Error, Result};
use crate::kernel::{KernelConfig, KernelEstimator};
use crate::model::{LogisticFit, ModelSpec, ProbabilityScorer};
use crate::roc::{run_band, BandMode, BandResult, BandSettings, Calibrated, IntervalMethod, PointEstimate};

pub const DEFAULT_MIN_CLASS_SIZE: usize = 20;
pub const DEFAULT_MIN_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistanceSpec {
    Euclidean,
    /// `|w . (x - x')|`
    WeightedProjection { weights: Vec<f64> },
}

impl DistanceSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            DistanceSpec::Euclidean => Ok(()),
            DistanceSpec::WeightedProjection { weights } => {
                if weights.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: weights.len(),
                    });
                }
                if weights.iter().all(|&w| w == 0.0) || weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::InvalidParameter(
                        "projection weights must be finite and not all zero".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceSpec::Euclidean => a
                .iter()
                .zip(b)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt(),
            DistanceSpec::WeightedProjection { weights } => weights
                .iter()
                .zip(a.iter().zip(b))
                .map(|(w, (u, v))| w * (u - v))
                .sum::<f64>()
                .abs(),
        }
    }
}

/// Where a localized interval is centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Center {
    /// `logit p_n(x)`, as in the iid intervals.
    #[default]
    PHat,
    /// `logit pi_tilde(x)`, the kernel estimate at the test point.
    PiTilde,
}

impl FromStr for Center {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_hat" => Ok(Center::PHat),
            "pi_tilde" => Ok(Center::PiTilde),
            _ => Err(Error::InvalidParameter(format!(
                "center must be p_hat or pi_tilde; got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for Center {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Center::PHat => "p_hat",
            Center::PiTilde => "pi_tilde",
        })
    }
}

fn default_min_class_size() -> usize {
    DEFAULT_MIN_CLASS_SIZE
}

/// JSON: `{"distance":{"kind":"weighted-projection","weights":[..]},
/// "min_size":100,"min_class_size":20}`; `center` is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodConfig {
    pub distance: DistanceSpec,
    pub min_size: usize,
    #[serde(default = "default_min_class_size")]
    pub min_class_size: usize,
    #[serde(default)]
    pub center: Center,
}

impl NeighborhoodConfig {
    pub fn new(distance: DistanceSpec, min_size: usize) -> Self {
        Self {
            distance,
            min_size,
            min_class_size: DEFAULT_MIN_CLASS_SIZE,
            center: Center::default(),
        }
    }

    pub fn with_center(mut self, center: Center) -> Self {
        self.center = center;
        self
    }

    pub fn with_min_class_size(mut self, n: usize) -> Self {
        self.min_class_size = n;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.distance.validate(dim)?;
        if self.min_size == 0 || self.min_class_size == 0 {
            return Err(Error::InvalidParameter(
                "neighbourhood sizes must be positive".into(),
            ));
        }
        if self.min_size < 2 * self.min_class_size {
            log::warn!(
                "min_size {} is below twice min_class_size {}; neighbourhoods will often expand",
                self.min_size,
                self.min_class_size
            );
        }
        Ok(())
    }
}

/// Calibration indices sorted by distance to `x`, ties by index.
pub fn nearest_order(x: &[f64], calib: &Dataset, distance: &DistanceSpec) -> Vec<usize> {
    let d: Vec<f64> = calib.iter().map(|i| distance.distance(x, &i.features)).collect();
    let mut order: Vec<usize> = (0..calib.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

fn check_point(x: &[f64], calib: &Dataset) -> Result<()> {
    if x.len() != calib.dim() {
        return Err(Error::DimensionMismatch {
            expected: calib.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

fn check_size(calib: &Dataset, cfg: &NeighborhoodConfig) -> Result<()> {
    if calib.len() < cfg.min_size {
        return Err(Error::InsufficientData(format!(
            "calibration set of {} is smaller than neighbourhood size {}",
            calib.len(),
            cfg.min_size
        )));
    }
    Ok(())
}

/// The `min_size` calibration points nearest to `x`, nearest first.
pub fn neighborhood(x: &[f64], calib: &Dataset, cfg: &NeighborhoodConfig) -> Result<Dataset> {
    calib.ensure_non_empty()?;
    check_point(x, calib)?;
    cfg.validate(calib.dim())?;
    check_size(calib, cfg)?;
    let order = nearest_order(x, calib, &cfg.distance);
    Ok(calib.subset(&order[..cfg.min_size]))
}

/// A localized interval with the neighbourhood it was read from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalInterval {
    pub interval: IndividualInterval,
    /// Final neighbourhood size after any doubling.
    pub neighborhood_size: usize,
    /// Class-`k` members in that neighbourhood.
    pub class_members: usize,
}

/// Calibration residuals plus the kernel estimate, shared read-only by all
/// test points.
#[derive(Debug, Clone)]
pub struct LocalCalibration {
    calib: Dataset,
    residuals: Vec<f64>,
    kernel: KernelEstimator,
}

impl LocalCalibration {
    pub fn new(
        calib: &Dataset,
        scorer: &dyn ProbabilityScorer,
        train: &Dataset,
        kcfg: &KernelConfig,
    ) -> Result<Self> {
        Self::with_reference(calib, scorer, train, kcfg, &ScoreReference::Kernel(*kcfg))
    }

    /// As [`LocalCalibration::new`], with the residual reference chosen
    /// explicitly. `kcfg` still drives the `pi_tilde` centre.
    pub fn with_reference(
        calib: &Dataset,
        scorer: &dyn ProbabilityScorer,
        train: &Dataset,
        kcfg: &KernelConfig,
        reference: &ScoreReference,
    ) -> Result<Self> {
        calib.ensure_non_empty()?;
        let kernel = KernelEstimator::fit(train, kcfg)?;
        let residuals = calibration_residuals(calib, scorer, train, reference)?;
        Ok(Self {
            calib: calib.clone(),
            residuals,
            kernel,
        })
    }

    pub fn calib(&self) -> &Dataset {
        &self.calib
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Interval for `pi(x)` conditioned on label `k`.
    pub fn interval(
        &self,
        x: &[f64],
        k: u32,
        scorer: &dyn ProbabilityScorer,
        cfg: &NeighborhoodConfig,
        alpha: f64,
    ) -> Result<LocalInterval> {
        check_alpha(alpha)?;
        check_point(x, &self.calib)?;
        check_size(&self.calib, cfg)?;
        let order = nearest_order(x, &self.calib, &cfg.distance);
        let labels: Vec<u32> = self.calib.labels().collect();

        let mut size = cfg.min_size;
        let mut pool;
        loop {
            pool = order[..size]
                .iter()
                .filter(|&&i| labels[i] == k)
                .map(|&i| self.residuals[i])
                .collect::<Vec<f64>>();
            if pool.len() >= cfg.min_class_size || size == order.len() {
                break;
            }
            size = (size * 2).min(order.len());
        }
        if pool.is_empty() {
            log::warn!("no calibration points of class {k}; interval is [0,1]");
        }
        pool.sort_by(f64::total_cmp);

        let center = match cfg.center {
            Center::PHat => scorer.score(x)?,
            Center::PiTilde => self.kernel.estimate(x)?,
        };
        let (lo, up) = shifted_bounds(center, &pool, alpha);
        Ok(LocalInterval {
            interval: IndividualInterval {
                lo,
                up,
                class_conditioned_on: Some(k),
                alpha,
            },
            neighborhood_size: size,
            class_members: pool.len(),
        })
    }
}

/// One-shot localized interval for `pi(x)` given label `k`.
#[allow(clippy::too_many_arguments)]
pub fn conditional_interval(
    x: &[f64],
    k: u32,
    scorer: &dyn ProbabilityScorer,
    calib: &Dataset,
    train: &Dataset,
    kcfg: &KernelConfig,
    ncfg: &NeighborhoodConfig,
    alpha: f64,
) -> Result<IndividualInterval> {
    ncfg.validate(calib.dim())?;
    let local = LocalCalibration::new(calib, scorer, train, kcfg)?;
    Ok(local.interval(x, k, scorer, ncfg, alpha)?.interval)
}

pub(crate) struct NonIidMethod {
    pub kernel: KernelConfig,
    pub neighborhood: NeighborhoodConfig,
    pub alpha: f64,
}

impl IntervalMethod for NonIidMethod {
    type State = LocalCalibration;

    fn mode(&self) -> BandMode {
        BandMode::NonIid
    }

    fn prepare(&self, fit: &LogisticFit, split: &DataSplit) -> Result<LocalCalibration> {
        LocalCalibration::new(&split.calib, fit, &split.train, &self.kernel)
    }

    fn interval(&self, cal: &Calibrated<LocalCalibration>, inst: &LabeledInstance) -> Result<PointEstimate> {
        let p_hat = cal.fit.score(&inst.features)?;
        let local = cal
            .state
            .interval(&inst.features, inst.label, &cal.fit, &self.neighborhood, self.alpha)?;
        Ok(PointEstimate {
            p_hat,
            lo: local.interval.lo,
            up: local.interval.up,
            empty_pool: local.class_members == 0,
        })
    }
}

/// TPR/FPR band for a covariate-shifted test set, with each test point's
/// interval read from its calibration neighbourhood.
pub fn band_noniid(
    obs: &Dataset,
    test: &Dataset,
    spec: &ModelSpec,
    kcfg: &KernelConfig,
    ncfg: &NeighborhoodConfig,
    settings: &BandSettings,
) -> Result<BandResult> {
    ncfg.validate(obs.dim())?;
    let method = NonIidMethod {
        kernel: *kcfg,
        neighborhood: ncfg.clone(),
        alpha: settings.alpha,
    };
    run_band(&method, obs, test, spec, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expit, logit, FnScorer};
    use proptest::prelude::*;

    fn line(points: &[(f64, u32)]) -> Dataset {
        Dataset::from_instances(
            points.iter().map(|&(x, y)| LabeledInstance::new(vec![x], y)).collect(),
        )
        .unwrap()
    }

    fn euclid(n: usize) -> NeighborhoodConfig {
        NeighborhoodConfig::new(DistanceSpec::Euclidean, n).with_min_class_size(1)
    }

    #[test]
    fn nearest_points_selected() {
        let calib = line(&[(3.0, 0), (1.0, 1), (2.0, 0)]);
        let nb = neighborhood(&[0.0], &calib, &euclid(2)).unwrap();
        let xs: Vec<f64> = nb.iter().map(|i| i.features[0]).collect();
        assert_eq!(xs, vec![1.0, 2.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let calib = line(&[(1.0, 0), (-1.0, 1), (2.0, 0)]);
        let nb = neighborhood(&[0.0], &calib, &euclid(1)).unwrap();
        assert_eq!(nb.get(0).unwrap().label, 0);
        assert_eq!(nb.get(0).unwrap().features[0], 1.0);
    }

    #[test]
    fn neighborhood_needs_enough_points() {
        let calib = line(&[(1.0, 0), (2.0, 1)]);
        assert!(matches!(
            neighborhood(&[0.0], &calib, &euclid(3)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn weighted_projection_distance() {
        let d = DistanceSpec::WeightedProjection {
            weights: vec![1.0, -2.0],
        };
        assert_eq!(d.distance(&[1.0, 1.0], &[0.0, 0.0]), 1.0);
        assert_eq!(d.distance(&[3.0, 0.0], &[0.0, 1.0]), 5.0);
        assert!(d.validate(3).is_err());
        let zero = DistanceSpec::WeightedProjection {
            weights: vec![0.0, 0.0],
        };
        assert!(zero.validate(2).is_err());
    }

    #[test]
    fn config_json() {
        let cfg: NeighborhoodConfig = serde_json::from_str(
            r#"{"distance":{"kind":"weighted-projection","weights":[1,1,5]},"min_size":100,"min_class_size":20}"#,
        )
        .unwrap();
        assert_eq!(cfg.min_size, 100);
        assert_eq!(cfg.center, Center::PHat);
        assert_eq!(
            cfg.distance,
            DistanceSpec::WeightedProjection {
                weights: vec![1.0, 1.0, 5.0]
            }
        );
        let e: NeighborhoodConfig =
            serde_json::from_str(r#"{"distance":{"kind":"euclidean"},"min_size":5,"center":"pi_tilde"}"#)
                .unwrap();
        assert_eq!(e.min_class_size, DEFAULT_MIN_CLASS_SIZE);
        assert_eq!(e.center, Center::PiTilde);
        assert_eq!("pi_tilde".parse::<Center>().unwrap(), Center::PiTilde);
        assert!("mean".parse::<Center>().is_err());
    }

    /// Scorer that reproduces the kernel estimate, so every residual is 0.
    fn kernel_scorer(train: &Dataset, kcfg: &KernelConfig) -> impl ProbabilityScorer {
        let est = KernelEstimator::fit(train, kcfg).unwrap();
        FnScorer::new(train.dim(), move |x: &[f64]| est.estimate(x).unwrap())
    }

    #[test]
    fn zero_scores_give_point_interval_at_pi_tilde() {
        let train = line(&[(-1.0, 0), (-0.5, 0), (0.2, 1), (0.8, 1), (0.1, 0), (1.5, 1)]);
        let calib_pts: Vec<(f64, u32)> =
            (0..20).map(|i| (f64::from(i) / 10.0 - 1.0, i % 2)).collect();
        let calib = line(&calib_pts);
        let kcfg = KernelConfig::fixed(0.5);
        let scorer = kernel_scorer(&train, &kcfg);
        let cfg = euclid(10).with_min_class_size(8).with_center(Center::PiTilde);
        let iv = conditional_interval(&[0.3], 1, &scorer, &calib, &train, &kcfg, &cfg, 0.5).unwrap();
        let pi = estimate_pi(&train, 0.3, &kcfg);
        assert!((iv.lo - pi).abs() < 1e-12 && (iv.up - pi).abs() < 1e-12);
    }

    fn estimate_pi(train: &Dataset, x: f64, kcfg: &KernelConfig) -> f64 {
        KernelEstimator::fit(train, kcfg).unwrap().estimate(&[x]).unwrap()
    }

    #[test]
    fn absent_class_gives_unit_interval() {
        let train = line(&[(-1.0, 0), (1.0, 1), (0.0, 0)]);
        let calib = line(&[(-0.8, 0), (0.4, 0), (0.9, 0)]);
        let scorer = FnScorer::new(1, |x: &[f64]| expit(x[0]));
        let cfg = euclid(2).with_min_class_size(2);
        let local = LocalCalibration::new(&calib, &scorer, &train, &KernelConfig::fixed(1.0)).unwrap();
        let iv = local.interval(&[0.0], 1, &scorer, &cfg, 0.1).unwrap();
        assert_eq!((iv.interval.lo, iv.interval.up), (0.0, 1.0));
        assert_eq!(iv.neighborhood_size, 3);
        assert_eq!(iv.class_members, 0);
    }

    #[test]
    fn neighbourhood_doubles_until_class_floor_met() {
        // class 1 only at the far end
        let mut pts: Vec<(f64, u32)> = (0..20).map(|i| (f64::from(i), 0)).collect();
        pts.extend((20..24).map(|i| (f64::from(i), 1)));
        let calib = line(&pts);
        let train = line(&[(0.0, 0), (10.0, 1), (5.0, 0)]);
        let scorer = FnScorer::new(1, |_: &[f64]| 0.5);
        let local = LocalCalibration::new(&calib, &scorer, &train, &KernelConfig::fixed(1.0)).unwrap();
        let cfg = euclid(3).with_min_class_size(2);
        let iv = local.interval(&[0.0], 1, &scorer, &cfg, 0.5).unwrap();
        // 3 -> 6 -> 12 -> 24: only the full set reaches class 1
        assert_eq!(iv.neighborhood_size, 24);
        assert_eq!(iv.class_members, 4);
        let iv0 = local.interval(&[0.0], 0, &scorer, &cfg, 0.5).unwrap();
        assert_eq!(iv0.neighborhood_size, 3);
    }

    #[test]
    fn full_neighbourhood_differs_from_iid_only_in_center() {
        let train = line(&[(-1.0, 0), (-0.5, 0), (0.2, 1), (0.8, 1), (0.1, 0), (1.5, 1), (-2.0, 0)]);
        let calib_pts: Vec<(f64, u32)> = (0..30)
            .map(|i| (f64::from(i) / 10.0 - 1.5, u32::from(i % 3 != 0)))
            .collect();
        let calib = line(&calib_pts);
        let kcfg = KernelConfig::fixed(0.6);
        let scorer = FnScorer::new(1, |x: &[f64]| expit(0.3 + 1.7 * x[0]));
        let scores = crate::conformal::compute_scores(&calib, &scorer, &train, &kcfg).unwrap();
        let local = LocalCalibration::new(&calib, &scorer, &train, &kcfg).unwrap();
        let alpha = 0.4;
        for x in [-1.0, 0.0, 0.7] {
            for k in [0, 1] {
                let iid = crate::conformal::class_conditional_interval(&[x], k, &scorer, &scores, alpha).unwrap();
                let p = local
                    .interval(&[x], k, &scorer, &euclid(30).with_min_class_size(1), alpha)
                    .unwrap();
                assert_eq!(p.interval, iid);
                let t = local
                    .interval(&[x], k, &scorer, &euclid(30).with_center(Center::PiTilde), alpha)
                    .unwrap();
                let shift = logit(estimate_pi(&train, x, &kcfg)) - logit(scorer.score(&[x]).unwrap());
                assert!((logit(t.interval.lo) - logit(iid.lo) - shift).abs() < 1e-9);
                assert!((logit(t.interval.up) - logit(iid.up) - shift).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn distances_are_symmetric(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
            w in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            for d in [DistanceSpec::Euclidean, DistanceSpec::WeightedProjection { weights: w.clone() }] {
                prop_assert_eq!(d.distance(&a, &b), d.distance(&b, &a));
            }
        }

        #[test]
        fn larger_neighbourhood_is_superset(
            xs in prop::collection::vec(-5.0f64..5.0, 5..40),
            q in -5.0f64..5.0,
            n in 1usize..5,
        ) {
            let calib = line(&xs.iter().enumerate().map(|(i, &x)| (x, (i % 2) as u32)).collect::<Vec<_>>());
            let small = neighborhood(&[q], &calib, &euclid(n)).unwrap();
            let large = neighborhood(&[q], &calib, &euclid(n + 1)).unwrap();
            prop_assert_eq!(small.len(), n);
            prop_assert_eq!(large.len(), n + 1);
            prop_assert_eq!(small.instances(), &large.instances()[..n]);
        }
    }
}
