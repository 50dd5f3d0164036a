//! One-vs-rest bands for problems with more than two classes.
//!
//! For a target label `l` both datasets are relabelled to `1(y == l)` and the
//! binary machinery runs unchanged: `p_{n,l}` is a logistic fit on the
//! relabelled training part, `pi_tilde_l` counts training points of class
//! `l`, and the two residual pools are class `l` and everything else.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::model::{fit_logistic, LogisticFit, ModelSpec};
use crate::noniid::{band_noniid, NeighborhoodConfig};
use crate::roc::{band_iid, BandResult, BandSettings, RocBand, RocCurve, RocPoint};

/// A dataset seen from one class: members of `target_label` against the
/// rest, with the scorer for that class.
#[derive(Debug, Clone)]
pub struct OneVsRestView {
    pub target_label: u32,
    pub positives: Dataset,
    pub negatives: Dataset,
    pub scorer: LogisticFit,
}

impl OneVsRestView {
    pub fn new(ds: &Dataset, target_label: u32, scorer: LogisticFit) -> Self {
        let (positives, negatives) = crate::data::partition_by_class(ds, target_label);
        Self {
            target_label,
            positives,
            negatives,
            scorer,
        }
    }
}

fn check_label_split(ds: &Dataset, l: u32) -> Result<()> {
    let counts = ds.class_counts();
    match counts.get(&l) {
        None => Err(Error::UnknownLabel(l)),
        Some(&c) if c == ds.len() => Err(Error::SingleClass),
        Some(_) => Ok(()),
    }
}

/// Logistic scorer for `P(y = l | x)`, fitted on `1(y == l)`.
pub fn fit_onevsrest(train: &Dataset, l: u32, spec: &ModelSpec) -> Result<LogisticFit> {
    train.ensure_non_empty()?;
    check_label_split(train, l)?;
    fit_logistic(&train.one_vs_rest(l), spec)
}

fn restore_labels(mut result: BandResult, test: &Dataset) -> BandResult {
    for iv in &mut result.intervals {
        iv.label = test.instances()[iv.test_index].label;
    }
    result
}

/// Band for `TPR_l` and `FPR_l`; intervals keep the original labels.
pub fn band_multilabel(
    obs: &Dataset,
    test: &Dataset,
    l: u32,
    spec: &ModelSpec,
    kcfg: &KernelConfig,
    settings: &BandSettings,
) -> Result<BandResult> {
    check_label_split(test, l).map_err(|_| Error::SingleClassTest)?;
    check_label_split(obs, l)?;
    let result = band_iid(&obs.one_vs_rest(l), &test.one_vs_rest(l), spec, kcfg, settings)?;
    Ok(restore_labels(result, test))
}

/// Non-iid counterpart of [`band_multilabel`].
pub fn band_multilabel_noniid(
    obs: &Dataset,
    test: &Dataset,
    l: u32,
    spec: &ModelSpec,
    kcfg: &KernelConfig,
    ncfg: &NeighborhoodConfig,
    settings: &BandSettings,
) -> Result<BandResult> {
    check_label_split(test, l).map_err(|_| Error::SingleClassTest)?;
    check_label_split(obs, l)?;
    let result = band_noniid(&obs.one_vs_rest(l), &test.one_vs_rest(l), spec, kcfg, ncfg, settings)?;
    Ok(restore_labels(result, test))
}

/// Bands for every label present in `test`, in ascending label order.
pub fn bands_all_classes(
    obs: &Dataset,
    test: &Dataset,
    spec: &ModelSpec,
    kcfg: &KernelConfig,
    ncfg: Option<&NeighborhoodConfig>,
    settings: &BandSettings,
) -> Result<Vec<(u32, BandResult)>> {
    let labels: Vec<u32> = test.class_counts().into_keys().collect();
    if labels.len() < 2 {
        return Err(Error::SingleClassTest);
    }
    labels
        .par_iter()
        .map(|&l| {
            let r = match ncfg {
                None => band_multilabel(obs, test, l, spec, kcfg, settings)?,
                Some(n) => band_multilabel_noniid(obs, test, l, spec, kcfg, n, settings)?,
            };
            Ok((l, r))
        })
        .collect()
}

/// How per-class bands are weighted when averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AverageWeights {
    /// Proportional to each class's test count.
    Size,
    Uniform,
}

impl std::str::FromStr for AverageWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size" => Ok(AverageWeights::Size),
            "uniform" => Ok(AverageWeights::Uniform),
            _ => Err(Error::InvalidParameter(format!(
                "average weights must be size or uniform; got `{s}`"
            ))),
        }
    }
}

impl AverageWeights {
    pub fn weights(&self, test: &Dataset, labels: &[u32]) -> Vec<f64> {
        let counts = test.class_counts();
        labels
            .iter()
            .map(|l| match self {
                AverageWeights::Size => counts.get(l).copied().unwrap_or(0) as f64,
                AverageWeights::Uniform => 1.0,
            })
            .collect()
    }
}

fn mix(rows: &[&[f64]], w: &[f64]) -> Vec<f64> {
    (0..rows[0].len())
        .map(|i| {
            let v: f64 = rows.iter().zip(w).map(|(r, wj)| wj * r[i]).sum();
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// Per-threshold convex combination of bands on a shared grid. This is a
/// summary only; the averaged band carries no coverage guarantee.
pub fn weighted_average_bands(bands: &[RocBand], weights: &[f64]) -> Result<RocBand> {
    let first = bands
        .first()
        .ok_or_else(|| Error::InvalidParameter("no bands to average".into()))?;
    if weights.len() != bands.len() {
        return Err(Error::InvalidParameter(format!(
            "{} weights for {} bands",
            weights.len(),
            bands.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidParameter("weights must be non-negative".into()));
    }
    if bands.iter().any(|b| b.lambdas != first.lambdas) {
        return Err(Error::GridMismatch);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    let w: Vec<f64> = weights.iter().map(|v| v / total).collect();

    let field = |f: fn(&RocBand) -> &Vec<f64>| {
        let rows: Vec<&[f64]> = bands.iter().map(|b| f(b).as_slice()).collect();
        mix(&rows, &w)
    };
    let tprs: Vec<Vec<f64>> = bands
        .iter()
        .map(|b| b.point_curve.points.iter().map(|p| p.tpr).collect())
        .collect();
    let fprs: Vec<Vec<f64>> = bands
        .iter()
        .map(|b| b.point_curve.points.iter().map(|p| p.fpr).collect())
        .collect();
    let tpr = mix(&tprs.iter().map(Vec::as_slice).collect::<Vec<_>>(), &w);
    let fpr = mix(&fprs.iter().map(Vec::as_slice).collect::<Vec<_>>(), &w);

    Ok(RocBand {
        lambdas: first.lambdas.clone(),
        sen_lo: field(|b| &b.sen_lo),
        sen_hi: field(|b| &b.sen_hi),
        spe_lo: field(|b| &b.spe_lo),
        spe_hi: field(|b| &b.spe_hi),
        point_curve: RocCurve {
            points: first
                .lambdas
                .iter()
                .enumerate()
                .map(|(i, &lambda)| RocPoint {
                    lambda,
                    tpr: tpr[i],
                    fpr: fpr[i],
                })
                .collect(),
        },
        alpha: first.alpha,
        mode: first.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledInstance;
    use crate::roc::{curve_from_scores, uniform_grid, BandMode};
    use proptest::prelude::*;

    fn toy_band(pos: &[(f64, f64)], neg: &[(f64, f64)]) -> RocBand {
        let ps: Vec<f64> = pos.iter().map(|p| (p.0 + p.1) / 2.0).collect();
        let ns: Vec<f64> = neg.iter().map(|p| (p.0 + p.1) / 2.0).collect();
        let curve = curve_from_scores(&ps, &ns, &uniform_grid(11));
        RocBand::from_intervals(pos, neg, curve, 0.1, BandMode::Iid)
    }

    fn three_class() -> Dataset {
        Dataset::from_instances(
            (0..60)
                .map(|i| {
                    let l = (i % 3) as u32 + 1;
                    let x = f64::from(l) + 0.37 * f64::from(i % 7) - 1.0;
                    LabeledInstance::new(vec![x], l)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn absent_or_universal_label_is_rejected() {
        let ds = three_class();
        let spec = ModelSpec::all_features(1);
        assert!(matches!(fit_onevsrest(&ds, 7, &spec), Err(Error::UnknownLabel(7))));
        let only = ds.one_vs_rest(2);
        let ones = Dataset::from_instances(only.iter().filter(|i| i.label == 1).cloned().collect()).unwrap();
        assert!(matches!(fit_onevsrest(&ones, 1, &spec), Err(Error::SingleClass)));
    }

    #[test]
    fn binary_fit_is_the_same_fit() {
        let ds = Dataset::from_instances(
            (0..40)
                .map(|i| LabeledInstance::new(vec![f64::from(i) / 10.0], u32::from(i % 3 == 0 || i > 30)))
                .collect(),
        )
        .unwrap();
        let spec = ModelSpec::all_features(1);
        assert_eq!(fit_onevsrest(&ds, 1, &spec).unwrap(), fit_logistic(&ds, &spec).unwrap());
    }

    #[test]
    fn view_partitions_source() {
        let ds = three_class();
        let fit = fit_onevsrest(&ds, 2, &ModelSpec::all_features(1)).unwrap();
        let view = OneVsRestView::new(&ds, 2, fit);
        assert_eq!(view.positives.len() + view.negatives.len(), ds.len());
        assert!(view.positives.iter().all(|i| i.label == 2));
        assert!(view.negatives.iter().all(|i| i.label != 2));
    }

    #[test]
    fn single_band_average_is_identity() {
        let b = toy_band(&[(0.6, 0.9), (0.3, 0.5)], &[(0.1, 0.4)]);
        assert_eq!(weighted_average_bands(std::slice::from_ref(&b), &[1.0]).unwrap(), b);
    }

    #[test]
    fn identical_bands_average_to_themselves() {
        let b = toy_band(&[(0.6, 0.9), (0.3, 0.5)], &[(0.1, 0.4), (0.2, 0.25)]);
        let avg = weighted_average_bands(&[b.clone(), b.clone()], &[0.3, 5.0]).unwrap();
        for (x, y) in avg.sen_lo.iter().zip(&b.sen_lo).chain(avg.spe_hi.iter().zip(&b.spe_hi)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn average_errors() {
        let b = toy_band(&[(0.6, 0.9)], &[(0.1, 0.4)]);
        assert!(matches!(weighted_average_bands(std::slice::from_ref(&b), &[0.0]), Err(Error::ZeroWeight)));
        let mut other = b.clone();
        other.lambdas[3] += 1e-3;
        assert!(matches!(
            weighted_average_bands(&[b.clone(), other], &[1.0, 1.0]),
            Err(Error::GridMismatch)
        ));
        assert!(weighted_average_bands(&[b], &[-1.0]).is_err());
    }

    proptest! {
        #[test]
        fn average_lies_between_extremes(
            a in prop::collection::vec((0.0f64..1.0, 0.0f64..0.3), 1..10),
            b in prop::collection::vec((0.0f64..1.0, 0.0f64..0.3), 1..10),
            wa in 0.0f64..10.0,
            wb in 0.01f64..10.0,
        ) {
            let iv = |v: &Vec<(f64, f64)>| -> Vec<(f64, f64)> { v.iter().map(|&(c, h)| ((c - h).max(0.0), (c + h).min(1.0))).collect() };
            let b1 = toy_band(&iv(&a), &iv(&b));
            let b2 = toy_band(&iv(&b), &iv(&a));
            let avg = weighted_average_bands(&[b1.clone(), b2.clone()], &[wa, wb]).unwrap();
            for i in 0..avg.lambdas.len() {
                for (m, x, y) in [
                    (avg.sen_lo[i], b1.sen_lo[i], b2.sen_lo[i]),
                    (avg.sen_hi[i], b1.sen_hi[i], b2.sen_hi[i]),
                    (avg.spe_lo[i], b1.spe_lo[i], b2.spe_lo[i]),
                    (avg.spe_hi[i], b1.spe_hi[i], b2.spe_hi[i]),
                ] {
                    prop_assert!(m >= x.min(y) - 1e-12 && m <= x.max(y) + 1e-12);
                }
                prop_assert!(avg.sen_lo[i] <= avg.sen_hi[i] + 1e-12);
                prop_assert!(avg.spe_lo[i] <= avg.spe_hi[i] + 1e-12);
            }
            for v in [&avg.sen_lo, &avg.sen_hi, &avg.spe_lo, &avg.spe_hi] {
                prop_assert!(v.windows(2).all(|w| w[0] >= w[1] - 1e-12));
            }
        }
    }
}
