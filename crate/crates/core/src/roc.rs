//! Empirical and oracle ROC curves, and confidence bands built by
//! aggregating per-point conformal intervals over a threshold grid.
//!
//! Every indicator uses strict `>`: a point counts as detected at `lambda`
//! when its score (or interval end) exceeds `lambda`. With the same
//! strictness on both the curve and the band, the band contains the curve
//! at every grid point whenever each interval contains its `p_n(x_j)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{shifted_bounds, ConformityScoreSet};
use crate::data::{derive_seed, split, DataSplit, Dataset, LabeledInstance, DEFAULT_TRAIN_FRACTION};
use crate::error::{check_alpha, Error, Result};
use crate::kernel::KernelConfig;
use crate::model::{fit_logistic, LogisticFit, ModelSpec, ProbabilityScorer};

/// Number of points in the default uniform part of a grid.
pub const DEFAULT_UNIFORM_POINTS: usize = 201;

/// Seed stream used for per-point resplits.
const RESPLIT_STREAM: u64 = 0x5245_5350;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub lambda: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn lambdas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.lambda).collect()
    }
}

/// Fraction of `values` strictly above `lambda`.
pub fn fraction_above(values: &[f64], lambda: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v > lambda).count() as f64 / values.len() as f64
}

/// Curve from already-computed scores of positives and negatives.
pub fn curve_from_scores(positives: &[f64], negatives: &[f64], grid: &[f64]) -> RocCurve {
    RocCurve {
        points: grid
            .iter()
            .map(|&lambda| RocPoint {
                lambda,
                tpr: fraction_above(positives, lambda),
                fpr: fraction_above(negatives, lambda),
            })
            .collect(),
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("lambda grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::InvalidParameter(
            "lambda grid must be strictly ascending within [0,1]".into(),
        ));
    }
    Ok(())
}

fn split_by_label(test: &Dataset, values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (inst, &v) in test.iter().zip(values) {
        match inst.label {
            1 => pos.push(v),
            0 => neg.push(v),
            l => return Err(Error::NonBinaryLabel(l)),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClassTest);
    }
    Ok((pos, neg))
}

/// Empirical ROC curve of `scorer` on `test`.
pub fn roc_curve(test: &Dataset, scorer: &dyn ProbabilityScorer, grid: &[f64]) -> Result<RocCurve> {
    check_grid(grid)?;
    let scores = scorer.score_all(test)?;
    let (pos, neg) = split_by_label(test, &scores)?;
    Ok(curve_from_scores(&pos, &neg, grid))
}

/// ROC curve of the true probabilities stored on `test`.
pub fn oracle_roc(test: &Dataset, grid: &[f64]) -> Result<RocCurve> {
    check_grid(grid)?;
    let probs = test.oracle_probs()?;
    let (pos, neg) = split_by_label(test, &probs)?;
    Ok(curve_from_scores(&pos, &neg, grid))
}

/// `k + 1` evenly spaced points on [0,1]; `k >= 1`.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    let k = points.max(2) - 1;
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

fn sorted_unique(mut values: Vec<f64>) -> Vec<f64> {
    values.retain(|v| v.is_finite());
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    values.sort_by(f64::total_cmp);
    values.dedup();
    values
}

/// How the threshold grid is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum LambdaGrid {
    /// `K` evenly spaced points on [0,1].
    Uniform(usize),
    /// {0, 1} and every test score.
    Jumps,
    /// Jumps plus the default uniform grid.
    #[default]
    Both,
    Explicit(Vec<f64>),
}


impl LambdaGrid {
    /// Concrete grid for the given test scores.
    pub fn resolve(&self, scores: &[f64]) -> Result<Vec<f64>> {
        let grid = match self {
            LambdaGrid::Uniform(k) => {
                if *k < 2 {
                    return Err(Error::InvalidParameter(
                        "uniform grid needs at least 2 points".into(),
                    ));
                }
                uniform_grid(*k)
            }
            LambdaGrid::Jumps => {
                let mut v = vec![0.0, 1.0];
                v.extend_from_slice(scores);
                sorted_unique(v)
            }
            LambdaGrid::Both => {
                let mut v = uniform_grid(DEFAULT_UNIFORM_POINTS);
                v.extend_from_slice(scores);
                sorted_unique(v)
            }
            LambdaGrid::Explicit(v) => v.clone(),
        };
        check_grid(&grid)?;
        Ok(grid)
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, LambdaGrid::Uniform(_))
    }
}

impl FromStr for LambdaGrid {
    type Err = Error;

    /// `uniform:K`, `jumps` or `both`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jumps" => Ok(LambdaGrid::Jumps),
            "both" => Ok(LambdaGrid::Both),
            _ => s
                .strip_prefix("uniform:")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 2)
                .map(LambdaGrid::Uniform)
                .ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "grid must be uniform:K (K >= 2), jumps or both; got `{s}`"
                    ))
                }),
        }
    }
}

impl fmt::Display for LambdaGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaGrid::Uniform(k) => write!(f, "uniform:{k}"),
            LambdaGrid::Jumps => f.write_str("jumps"),
            LambdaGrid::Both => f.write_str("both"),
            LambdaGrid::Explicit(v) => write!(f, "explicit:{}", v.len()),
        }
    }
}

/// Sorted union of {0, 1}, the test scores and a 201-point uniform grid.
pub fn default_lambda_grid(test: &Dataset, scorer: &dyn ProbabilityScorer) -> Result<Vec<f64>> {
    test.ensure_non_empty()?;
    LambdaGrid::Both.resolve(&scorer.score_all(test)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandMode {
    Iid,
    NonIid,
}

/// Per-threshold envelopes for TPR (`sen_*`) and FPR (`spe_*`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocBand {
    pub lambdas: Vec<f64>,
    pub sen_lo: Vec<f64>,
    pub sen_hi: Vec<f64>,
    pub spe_lo: Vec<f64>,
    pub spe_hi: Vec<f64>,
    pub point_curve: RocCurve,
    pub alpha: f64,
    pub mode: BandMode,
}

impl RocBand {
    /// Builds a band from per-point interval ends of positives and
    /// negatives.
    pub fn from_intervals(
        positives: &[(f64, f64)],
        negatives: &[(f64, f64)],
        point_curve: RocCurve,
        alpha: f64,
        mode: BandMode,
    ) -> Self {
        let ends = |pts: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { pts.iter().copied().unzip() };
        let (pos_lo, pos_up) = ends(positives);
        let (neg_lo, neg_up) = ends(negatives);
        let lambdas = point_curve.lambdas();
        let over = |v: &[f64]| -> Vec<f64> { lambdas.iter().map(|&l| fraction_above(v, l)).collect() };
        RocBand {
            sen_lo: over(&pos_lo),
            sen_hi: over(&pos_up),
            spe_lo: over(&neg_lo),
            spe_hi: over(&neg_up),
            lambdas,
            point_curve,
            alpha,
            mode,
        }
    }

    /// Whether `curve` (on the same grid) lies inside both envelopes at
    /// every threshold.
    pub fn contains_curve(&self, curve: &RocCurve) -> bool {
        curve.points.len() == self.lambdas.len()
            && curve.points.iter().enumerate().all(|(i, p)| {
                self.sen_lo[i] <= p.tpr
                    && p.tpr <= self.sen_hi[i]
                    && self.spe_lo[i] <= p.fpr
                    && p.fpr <= self.spe_hi[i]
            })
    }

    /// Mean of `sen_hi - sen_lo` and `spe_hi - spe_lo` over the grid.
    pub fn mean_width(&self) -> (f64, f64) {
        let n = self.lambdas.len() as f64;
        let sen = self.sen_hi.iter().zip(&self.sen_lo).map(|(h, l)| h - l).sum::<f64>() / n;
        let spe = self.spe_hi.iter().zip(&self.spe_lo).map(|(h, l)| h - l).sum::<f64>() / n;
        (sen, spe)
    }

    /// CSV with header `lambda,tpr,fpr,sen_lo,sen_hi,spe_lo,spe_hi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda", "tpr", "fpr", "sen_lo", "sen_hi", "spe_lo", "spe_hi"])?;
        for (i, p) in self.point_curve.points.iter().enumerate() {
            w.write_record(
                [
                    p.lambda,
                    p.tpr,
                    p.fpr,
                    self.sen_lo[i],
                    self.sen_hi[i],
                    self.spe_lo[i],
                    self.spe_hi[i],
                ]
                .map(|v| v.to_string()),
            )?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Interval for one test point, as written to `intervals.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestInterval {
    pub test_index: usize,
    pub label: u32,
    pub p_hat: f64,
    pub lo: f64,
    pub up: f64,
    pub alpha: f64,
}

/// A band together with its per-point intervals and any warnings raised
/// while building it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub band: RocBand,
    pub intervals: Vec<TestInterval>,
    pub warnings: Vec<String>,
}

impl BandResult {
    /// Whether any interval fell back to [0,1] for lack of calibration
    /// scores.
    pub fn is_degenerate(&self) -> bool {
        !self.warnings.is_empty()
    }

    /// CSV with header `test_index,label,p_hat,lo,up,alpha`.
    pub fn write_intervals_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for iv in &self.intervals {
            w.serialize(iv)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Settings shared by every band construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSettings {
    pub alpha: f64,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub grid: LambdaGrid,
    /// Draw a fresh train/calibration split for every test point.
    pub resplit_per_point: bool,
}

impl BandSettings {
    pub fn new(alpha: f64, split_seed: u64) -> Self {
        Self {
            alpha,
            split_seed,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            grid: LambdaGrid::default(),
            resplit_per_point: false,
        }
    }

    pub fn with_grid(mut self, grid: LambdaGrid) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_resplit(mut self, resplit: bool) -> Self {
        self.resplit_per_point = resplit;
        self
    }
}

/// A fitted model with calibration scores, ready to produce intervals.
pub(crate) struct Calibrated<C> {
    pub fit: LogisticFit,
    pub state: C,
}

/// One point's interval, with a flag raised when its score pool was empty.
pub(crate) struct PointEstimate {
    pub p_hat: f64,
    pub lo: f64,
    pub up: f64,
    pub empty_pool: bool,
}

/// The per-method part of band construction: what is computed from the
/// calibration set, and how a test point's interval is read from it.
pub(crate) trait IntervalMethod: Sync {
    type State: Sync + Send;

    fn mode(&self) -> BandMode;

    fn prepare(&self, fit: &LogisticFit, split: &DataSplit) -> Result<Self::State>;

    fn interval(&self, cal: &Calibrated<Self::State>, inst: &LabeledInstance) -> Result<PointEstimate>;

    fn calibrate(&self, obs: &Dataset, spec: &ModelSpec, fraction: f64, seed: u64) -> Result<Calibrated<Self::State>> {
        let split = split(obs, fraction, seed)?;
        let fit = fit_logistic(&split.train, spec)?;
        if !fit.converged {
            log::warn!("logistic fit did not converge after {} iterations", fit.iterations);
        }
        let state = self.prepare(&fit, &split)?;
        Ok(Calibrated { fit, state })
    }
}

/// Algorithm-1 intervals: class-conditional score pools over the whole
/// calibration set, centred at `logit p_n(x)`.
pub(crate) struct IidMethod {
    pub kernel: KernelConfig,
    pub alpha: f64,
}

impl IntervalMethod for IidMethod {
    type State = ConformityScoreSet;

    fn mode(&self) -> BandMode {
        BandMode::Iid
    }

    fn prepare(&self, fit: &LogisticFit, split: &DataSplit) -> Result<ConformityScoreSet> {
        crate::conformal::compute_scores(&split.calib, fit, &split.train, &self.kernel)
    }

    fn interval(&self, cal: &Calibrated<ConformityScoreSet>, inst: &LabeledInstance) -> Result<PointEstimate> {
        let p_hat = cal.fit.score(&inst.features)?;
        let pool = cal.state.class(inst.label)?;
        let (lo, up) = shifted_bounds(p_hat, pool, self.alpha);
        Ok(PointEstimate {
            p_hat,
            lo,
            up,
            empty_pool: pool.is_empty(),
        })
    }
}

fn validate_inputs(obs: &Dataset, test: &Dataset, spec: &ModelSpec, alpha: f64) -> Result<()> {
    check_alpha(alpha)?;
    obs.ensure_non_empty()?;
    test.ensure_non_empty()?;
    obs.ensure_binary()?;
    test.ensure_binary()?;
    if obs.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.dim(),
            got: test.dim(),
        });
    }
    spec.validate(obs.dim())?;
    let counts = test.class_counts();
    if counts.len() < 2 {
        return Err(Error::SingleClassTest);
    }
    Ok(())
}

/// Shared driver: calibrate (once, or per point), compute every test
/// interval, then aggregate on the resolved grid.
pub(crate) fn run_band<M: IntervalMethod>(
    method: &M,
    obs: &Dataset,
    test: &Dataset,
    spec: &ModelSpec,
    settings: &BandSettings,
) -> Result<BandResult> {
    validate_inputs(obs, test, spec, settings.alpha)?;

    let estimates: Vec<PointEstimate> = if settings.resplit_per_point {
        test.instances()
            .par_iter()
            .enumerate()
            .map(|(j, inst)| {
                let seed = derive_seed(settings.split_seed, RESPLIT_STREAM, j as u64);
                let cal = method.calibrate(obs, spec, settings.train_fraction, seed)?;
                method.interval(&cal, inst)
            })
            .collect::<Result<_>>()?
    } else {
        let cal = method.calibrate(obs, spec, settings.train_fraction, settings.split_seed)?;
        test.instances()
            .par_iter()
            .map(|inst| method.interval(&cal, inst))
            .collect::<Result<_>>()?
    };

    let mut warnings = Vec::new();
    for k in [1u32, 0] {
        let empty = test
            .iter()
            .zip(&estimates)
            .filter(|(inst, e)| inst.label == k && e.empty_pool)
            .count();
        if empty > 0 {
            let msg = format!(
                "{empty} test point(s) of class {k} had no calibration scores; their intervals are [0,1]"
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let p_hats: Vec<f64> = estimates.iter().map(|e| e.p_hat).collect();
    let grid = settings.grid.resolve(&p_hats)?;
    let (pos_scores, neg_scores) = split_by_label(test, &p_hats)?;
    let point_curve = curve_from_scores(&pos_scores, &neg_scores, &grid);

    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut intervals = Vec::with_capacity(estimates.len());
    for (j, (inst, e)) in test.iter().zip(&estimates).enumerate() {
        if inst.label == 1 {
            positives.push((e.lo, e.up));
        } else {
            negatives.push((e.lo, e.up));
        }
        intervals.push(TestInterval {
            test_index: j,
            label: inst.label,
            p_hat: e.p_hat,
            lo: e.lo,
            up: e.up,
            alpha: settings.alpha,
        });
    }

    Ok(BandResult {
        band: RocBand::from_intervals(&positives, &negatives, point_curve, settings.alpha, method.mode()),
        intervals,
        warnings,
    })
}

/// TPR/FPR confidence band for an iid test set: split `obs`, fit the
/// logistic model, score the calibration part against the kernel estimate,
/// and bound each test point's probability with scores of its own class.
pub fn band_iid(
    obs: &Dataset,
    test: &Dataset,
    spec: &ModelSpec,
    kernel: &KernelConfig,
    settings: &BandSettings,
) -> Result<BandResult> {
    let method = IidMethod {
        kernel: *kernel,
        alpha: settings.alpha,
    };
    run_band(&method, obs, test, spec, settings)
}
