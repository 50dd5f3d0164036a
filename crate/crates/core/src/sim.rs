//! Seeded generators for the three simulation designs, and a Monte-Carlo
//! harness measuring how often the individual intervals cover the true
//! probability `pi(x)` and the model output `p_n(x)`.
//!
//! Every replication draws its own data and split from seeds derived from
//! `base_seed`, so results do not depend on thread count or run order.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    class_conditional_interval, compute_oracle_scores, compute_scores, IndividualInterval,
    ScoreReference,
};
use crate::data::{derive_seed, split, Dataset, LabeledInstance, DEFAULT_TRAIN_FRACTION};
use crate::error::{check_alpha, Error, Result};
use crate::kernel::KernelConfig;
use crate::model::{expit, fit_logistic, FnScorer, ModelSpec, ProbabilityScorer};
use crate::noniid::{DistanceSpec, LocalCalibration, NeighborhoodConfig, DEFAULT_MIN_SIZE};

const DATA_STREAM: u64 = 0x4441_5441;
const SPLIT_STREAM: u64 = 0x5350_4c54;
const JITTERS: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

/// Multivariate normal with a cached lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Mvn {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

/// Cholesky factor of a positive-semidefinite matrix. Zero pivots are
/// allowed when the rest of their column is zero too.
fn psd_cholesky(a: &[Vec<f64>], jitter: f64) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(1.0f64, f64::max);
    let tol = 1e-12 * scale;
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let d = a[j][j] + jitter - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d > tol {
            let ljj = d.sqrt();
            l[j][j] = ljj;
            for i in j + 1..n {
                let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                l[i][j] = s / ljj;
            }
        } else if d >= -tol {
            for i in j + 1..n {
                let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if s.abs() > tol.sqrt() {
                    return None;
                }
            }
        } else {
            return None;
        }
    }
    Some(l)
}

impl Mvn {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidParameter("mean must be non-empty".into()));
        }
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.len(),
            });
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i][j] - cov[j][i]).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(
                        "covariance matrix is not symmetric".into(),
                    ));
                }
            }
        }
        let chol = JITTERS
            .iter()
            .find_map(|&j| psd_cholesky(&cov, j))
            .ok_or(Error::NotPositiveSemidefinite)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[Vec<f64>] {
        &self.cov
    }

    pub fn chol(&self) -> &[Vec<f64>] {
        &self.chol
    }

    /// One draw `mu + L z`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.mean
            .iter()
            .zip(&self.chol)
            .map(|(m, row)| m + row.iter().zip(&z).map(|(l, zi)| l * zi).sum::<f64>())
            .collect()
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

/// `n` rows drawn from `dist` with a fresh generator seeded by `seed`.
pub fn sample_mvn(dist: &Mvn, n: usize, seed: u64) -> Vec<Vec<f64>> {
    dist.sample_with(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// Sample-size study with correlated covariates.
    Study1,
    /// Bias from a missing predictor; `x3` independent of `x1, x2`.
    Study2Predictor,
    /// Bias from a missing `x1 * x3` interaction.
    Study2Interaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMode {
    Iid,
    Noniid,
}

/// What stands in for `pi` in the calibration residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    #[default]
    Kernel,
    Oracle,
}

/// A model to evaluate. With `oracle_scorer` set, the true probability is
/// used as `p_n` and `spec` is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedModel {
    pub name: String,
    #[serde(flatten)]
    pub spec: ModelSpec,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oracle_scorer: bool,
}

impl NamedModel {
    pub fn new(name: &str, spec: ModelSpec) -> Self {
        Self {
            name: name.into(),
            spec,
            oracle_scorer: false,
        }
    }

    pub fn oracle(name: &str) -> Self {
        Self {
            name: name.into(),
            spec: ModelSpec::new(vec![]),
            oracle_scorer: true,
        }
    }
}

fn default_n_test() -> usize {
    200
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

/// One simulation design. Omitted `beta`, `models` and `neighborhood` take
/// study-specific defaults (see [`StudyConfig::effective_beta`] and
/// friends).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study: Study,
    pub n_obs: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// `(beta0, beta1, beta2, beta3)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// Interaction coefficient; only read by `study2_interaction`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub test_mode: TestMode,
    pub alpha: f64,
    pub replications: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub models: Vec<NamedModel>,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighborhood: Option<NeighborhoodConfig>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub scores: ScoreSource,
}

fn default_gamma() -> f64 {
    1.0
}

impl StudyConfig {
    /// A config with every optional field at its default.
    pub fn new(study: Study, n_obs: usize, test_mode: TestMode, alpha: f64, replications: usize, base_seed: u64) -> Self {
        Self {
            study,
            n_obs,
            n_test: default_n_test(),
            beta: None,
            gamma: default_gamma(),
            test_mode,
            alpha,
            replications,
            base_seed,
            models: Vec::new(),
            kernel: KernelConfig::default(),
            neighborhood: None,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            scores: ScoreSource::Kernel,
        }
    }

    /// `(0,1,1,5)` for study 1, `(1,1,1,1)` for both study-2 settings.
    pub fn effective_beta(&self) -> Vec<f64> {
        self.beta.clone().unwrap_or_else(|| match self.study {
            Study::Study1 => vec![0.0, 1.0, 1.0, 5.0],
            Study::Study2Predictor | Study::Study2Interaction => vec![1.0, 1.0, 1.0, 1.0],
        })
    }

    pub fn default_models(study: Study) -> Vec<NamedModel> {
        match study {
            Study::Study1 => vec![
                NamedModel::new("M1", ModelSpec::new(vec![0, 1, 2])),
                NamedModel::new("M2", ModelSpec::new(vec![1, 2])),
                NamedModel::new("M3", ModelSpec::new(vec![2])),
            ],
            Study::Study2Predictor => vec![
                NamedModel::new("M1", ModelSpec::new(vec![2])),
                NamedModel::new("M2", ModelSpec::new(vec![0, 1])),
            ],
            Study::Study2Interaction => vec![
                NamedModel::new("M1", ModelSpec::new(vec![0, 1, 2])),
                NamedModel::new("M2", ModelSpec::new(vec![0, 2]).with_interaction(0, 2)),
            ],
        }
    }

    pub fn effective_models(&self) -> Vec<NamedModel> {
        if self.models.is_empty() {
            Self::default_models(self.study)
        } else {
            self.models.clone()
        }
    }

    /// Projection on `(beta1, beta2, beta3)` with 100 neighbours.
    pub fn effective_neighborhood(&self) -> NeighborhoodConfig {
        self.neighborhood.clone().unwrap_or_else(|| {
            NeighborhoodConfig::new(
                DistanceSpec::WeightedProjection {
                    weights: self.effective_beta()[1..].to_vec(),
                },
                DEFAULT_MIN_SIZE,
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.replications == 0 {
            return Err(Error::InvalidParameter("replications must be positive".into()));
        }
        if self.n_obs < 4 || self.n_test < 2 {
            return Err(Error::InvalidParameter(
                "n_obs must be at least 4 and n_test at least 2".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParameter("train fraction must be in (0,1)".into()));
        }
        let beta = self.effective_beta();
        if beta.len() != 4 || beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter(
                "beta must hold 4 finite values (beta0..beta3)".into(),
            ));
        }
        if !self.gamma.is_finite() {
            return Err(Error::InvalidParameter("gamma must be finite".into()));
        }
        for m in self.effective_models() {
            if !m.oracle_scorer {
                m.spec.validate(3)?;
            }
        }
        if self.test_mode == TestMode::Noniid {
            self.effective_neighborhood().validate(3)?;
        }

        if !(100..=2000).contains(&self.n_obs) {
            log::warn!("n_obs = {} is outside the studied range [100, 2000]", self.n_obs);
        }
        match self.study {
            Study::Study2Predictor if !(0.1..=5.5).contains(&beta[3]) => {
                log::warn!("beta3 = {} is outside the studied range [0.1, 5.5]", beta[3]);
            }
            Study::Study2Interaction if !(0.1..=5.5).contains(&self.gamma) => {
                log::warn!("gamma = {} is outside the studied range [0.1, 5.5]", self.gamma);
            }
            _ => {}
        }
        Ok(())
    }

    /// `logit pi(x)` for this design.
    pub fn true_logit(&self, x: &[f64]) -> f64 {
        let b = self.effective_beta();
        let mut z = b[0] + b[1] * x[0] + b[2] * x[1] + b[3] * x[2];
        if self.study == Study::Study2Interaction {
            z += self.gamma * x[0] * x[2];
        }
        z
    }

    pub fn true_prob(&self, x: &[f64]) -> f64 {
        expit(self.true_logit(x))
    }

    /// Covariate distribution of the observed data.
    pub fn obs_distribution(&self) -> Result<Mvn> {
        let cov = match self.study {
            Study::Study1 => study1_cov(),
            Study::Study2Predictor | Study::Study2Interaction => study2_cov(),
        };
        Mvn::new(vec![0.0; 3], cov)
    }

    /// Covariate distribution of the test data.
    pub fn test_distribution(&self) -> Result<Mvn> {
        if self.test_mode == TestMode::Iid {
            return self.obs_distribution();
        }
        match self.study {
            Study::Study1 | Study::Study2Predictor => Mvn::new(vec![2.0, 1.0, -0.6], shifted_cov()),
            Study::Study2Interaction => {
                let mut cov = shifted_cov();
                for i in 0..2 {
                    cov[i][2] = 0.0;
                    cov[2][i] = 0.0;
                }
                Mvn::new(vec![1.0, 1.0, 2.0 * self.gamma - 2.0], cov)
            }
        }
    }
}

/// `Sigma_ii = 1`, `Sigma_ij = -(-0.1)^|i-j|`.
fn study1_cov() -> Vec<Vec<f64>> {
    (0..3)
        .map(|i: i32| {
            (0..3)
                .map(|j: i32| if i == j { 1.0 } else { -(-0.1f64).powi((i - j).abs()) })
                .collect()
        })
        .collect()
}

/// Unit variances, `Sigma_12 = 0.1`, `x3` independent.
fn study2_cov() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.1, 0.0], vec![0.1, 1.0, 0.0], vec![0.0, 0.0, 1.0]]
}

/// `Sigma'_ii = 0.6 - 0.1 i` (1-based), `Sigma'_ij = 0.1^|i-j|`.
fn shifted_cov() -> Vec<Vec<f64>> {
    (0..3)
        .map(|i: i32| {
            (0..3)
                .map(|j: i32| {
                    if i == j {
                        0.6 - 0.1 * f64::from(i + 1)
                    } else {
                        0.1f64.powi((i - j).abs())
                    }
                })
                .collect()
        })
        .collect()
}

fn labelled<R: Rng + ?Sized>(cfg: &StudyConfig, xs: Vec<Vec<f64>>, rng: &mut R) -> Result<Dataset> {
    let instances = xs
        .into_iter()
        .map(|x| {
            let p = cfg.true_prob(&x);
            let y = u32::from(rng.random::<f64>() < p);
            LabeledInstance::new(x, y).with_oracle(p)
        })
        .collect();
    Dataset::new(3, instances)
}

fn generate(cfg: &StudyConfig, rep: usize) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.base_seed, DATA_STREAM, rep as u64));
    let xo = cfg.obs_distribution()?.sample_with(&mut rng, cfg.n_obs);
    let obs = labelled(cfg, xo, &mut rng)?;
    let xt = cfg.test_distribution()?.sample_with(&mut rng, cfg.n_test);
    let test = labelled(cfg, xt, &mut rng)?;
    Ok((obs, test))
}

/// Observed and test data of replication `rep` for study 1.
pub fn generate_study1(cfg: &StudyConfig, rep: usize) -> Result<(Dataset, Dataset)> {
    if cfg.study != Study::Study1 {
        return Err(Error::InvalidParameter("generate_study1 needs study = study1".into()));
    }
    generate(cfg, rep)
}

/// Observed and test data of replication `rep` for either study-2 setting.
pub fn generate_study2(cfg: &StudyConfig, rep: usize) -> Result<(Dataset, Dataset)> {
    if cfg.study == Study::Study1 {
        return Err(Error::InvalidParameter(
            "generate_study2 needs study = study2_predictor or study2_interaction".into(),
        ));
    }
    generate(cfg, rep)
}

/// Observed and test data of replication `rep` for any study.
pub fn generate_study(cfg: &StudyConfig, rep: usize) -> Result<(Dataset, Dataset)> {
    generate(cfg, rep)
}

/// Seed of the train/calibration split in replication `rep`.
pub fn split_seed(base_seed: u64, rep: usize) -> u64 {
    derive_seed(base_seed, SPLIT_STREAM, rep as u64)
}

/// Coverage of one model on one class in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub rep: usize,
    pub model: String,
    pub k: u32,
    pub cov_pi: f64,
    pub cov_p: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub model: String,
    pub k: u32,
    pub replications: usize,
    pub mean_cov_pi: f64,
    pub se_cov_pi: f64,
    pub mean_cov_p: f64,
    pub se_cov_p: f64,
    pub mean_length: f64,
    pub se_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplication {
    pub rep: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: StudyConfig,
    pub succeeded: usize,
    pub failed: Vec<FailedReplication>,
    pub aggregates: Vec<Aggregate>,
    #[serde(skip)]
    pub rows: Vec<ReplicationRow>,
}

impl CoverageReport {
    pub fn aggregate(&self, model: &str, k: u32) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.model == model && a.k == k)
    }

    pub fn success_rate(&self) -> f64 {
        self.succeeded as f64 / self.config.replications as f64
    }

    /// Rows as CSV: `rep,model,k,cov_pi,cov_p,mean_length`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Plain-text table of the aggregates.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>2} {:>6} {:>16} {:>16} {:>16}",
            "model", "k", "reps", "cov_pi", "cov_p", "length"
        );
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{:<8} {:>2} {:>6} {:>8.4} ±{:.4} {:>8.4} ±{:.4} {:>8.4} ±{:.4}",
                a.model,
                a.k,
                a.replications,
                a.mean_cov_pi,
                a.se_cov_pi,
                a.mean_cov_p,
                a.se_cov_p,
                a.mean_length,
                a.se_length
            );
        }
        let _ = writeln!(
            s,
            "replications: {} succeeded, {} failed",
            self.succeeded,
            self.failed.len()
        );
        s
    }
}

/// Intervals for every test point under one model, conditioned on the
/// point's own label, paired with the model's `p_n`.
pub fn model_intervals(
    cfg: &StudyConfig,
    model: &NamedModel,
    obs: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<Vec<(IndividualInterval, f64)>> {
    let parts = split(obs, cfg.train_fraction, seed)?;
    let scorer: Box<dyn ProbabilityScorer> = if model.oracle_scorer {
        let truth = cfg.clone();
        Box::new(FnScorer::new(3, move |x: &[f64]| truth.true_prob(x)))
    } else {
        let fit = fit_logistic(&parts.train, &model.spec)?;
        if !fit.converged {
            log::debug!("model {} did not converge", model.name);
        }
        Box::new(fit)
    };
    let reference = match cfg.scores {
        ScoreSource::Kernel => ScoreReference::Kernel(cfg.kernel),
        ScoreSource::Oracle => ScoreReference::Oracle,
    };

    match cfg.test_mode {
        TestMode::Iid => {
            let scores = match reference {
                ScoreReference::Kernel(k) => compute_scores(&parts.calib, &scorer, &parts.train, &k)?,
                ScoreReference::Oracle => compute_oracle_scores(&parts.calib, &scorer)?,
            };
            test.iter()
                .map(|inst| {
                    let iv = class_conditional_interval(&inst.features, inst.label, &scorer, &scores, cfg.alpha)?;
                    Ok((iv, scorer.score(&inst.features)?))
                })
                .collect()
        }
        TestMode::Noniid => {
            let ncfg = cfg.effective_neighborhood();
            let local = LocalCalibration::with_reference(&parts.calib, &scorer, &parts.train, &cfg.kernel, &reference)?;
            test.iter()
                .map(|inst| {
                    let iv = local.interval(&inst.features, inst.label, &scorer, &ncfg, cfg.alpha)?;
                    Ok((iv.interval, scorer.score(&inst.features)?))
                })
                .collect()
        }
    }
}

fn class_rows(rep: usize, model: &str, test: &Dataset, ivs: &[(IndividualInterval, f64)]) -> Result<Vec<ReplicationRow>> {
    let oracle = test.oracle_probs()?;
    let mut rows = Vec::new();
    for k in [0u32, 1] {
        let members: Vec<usize> = (0..test.len()).filter(|&j| test.instances()[j].label == k).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let cov_pi = members.iter().filter(|&&j| ivs[j].0.contains(oracle[j])).count() as f64 / n;
        let cov_p = members.iter().filter(|&&j| ivs[j].0.contains(ivs[j].1)).count() as f64 / n;
        let mean_length = members.iter().map(|&j| ivs[j].0.length()).sum::<f64>() / n;
        rows.push(ReplicationRow {
            rep,
            model: model.to_string(),
            k,
            cov_pi,
            cov_p,
            mean_length,
        });
    }
    Ok(rows)
}

fn run_replication(cfg: &StudyConfig, models: &[NamedModel], rep: usize) -> Result<Vec<ReplicationRow>> {
    let (obs, test) = generate(cfg, rep)?;
    let seed = split_seed(cfg.base_seed, rep);
    let mut rows = Vec::new();
    for model in models {
        let ivs = model_intervals(cfg, model, &obs, &test, seed)?;
        rows.extend(class_rows(rep, &model.name, &test, &ivs)?);
    }
    Ok(rows)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs every replication (in parallel) and aggregates coverage per model
/// and class. A replication that errors is recorded and skipped.
pub fn run_coverage_experiment(cfg: &StudyConfig) -> Result<CoverageReport> {
    cfg.validate()?;
    let models = cfg.effective_models();
    let outcomes: Vec<Result<Vec<ReplicationRow>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_replication(cfg, &models, rep))
        .collect();

    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                failed.push(FailedReplication {
                    rep,
                    error: e.to_string(),
                });
            }
        }
    }

    let mut aggregates = Vec::new();
    for model in &models {
        for k in [0u32, 1] {
            let sel: Vec<&ReplicationRow> = rows.iter().filter(|r| r.model == model.name && r.k == k).collect();
            if sel.is_empty() {
                continue;
            }
            let col = |f: fn(&ReplicationRow) -> f64| -> Vec<f64> { sel.iter().map(|r| f(r)).collect() };
            let (mean_cov_pi, se_cov_pi) = mean_se(&col(|r| r.cov_pi));
            let (mean_cov_p, se_cov_p) = mean_se(&col(|r| r.cov_p));
            let (mean_length, se_length) = mean_se(&col(|r| r.mean_length));
            aggregates.push(Aggregate {
                model: model.name.clone(),
                k,
                replications: sel.len(),
                mean_cov_pi,
                se_cov_pi,
                mean_cov_p,
                se_cov_p,
                mean_length,
                se_length,
            });
        }
    }

    Ok(CoverageReport {
        config: cfg.clone(),
        succeeded: cfg.replications - failed.len(),
        failed,
        aggregates,
        rows,
    })
}

/// Observed-sample sizes swept by default in the first study.
pub const DEFAULT_SWEEP_SIZES: [usize; 5] = [100, 200, 500, 1000, 2000];

/// One coverage experiment per sample size, otherwise sharing `cfg`.
pub fn run_sample_size_sweep(cfg: &StudyConfig, sizes: &[usize]) -> Result<Vec<(usize, CoverageReport)>> {
    if sizes.is_empty() {
        return Err(Error::InvalidParameter("sample-size sweep needs at least one size".into()));
    }
    sizes
        .iter()
        .map(|&n| {
            let c = StudyConfig { n_obs: n, ..cfg.clone() };
            run_coverage_experiment(&c).map(|r| (n, r))
        })
        .collect()
}

/// Sweep aggregates as CSV, one row per size, model and class.
pub fn write_sweep_csv<W: Write>(sweep: &[(usize, CoverageReport)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n_obs", "model", "k", "replications", "mean_cov_pi", "se_cov_pi", "mean_cov_p", "se_cov_p",
        "mean_length", "se_length",
    ])?;
    for (n, report) in sweep {
        for a in &report.aggregates {
            w.write_record([
                n.to_string(),
                a.model.clone(),
                a.k.to_string(),
                a.replications.to_string(),
                a.mean_cov_pi.to_string(),
                a.se_cov_pi.to_string(),
                a.mean_cov_p.to_string(),
                a.se_cov_p.to_string(),
                a.mean_length.to_string(),
                a.se_length.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Well-separated Gaussian classes `1..=L` with a shared isotropic spread,
/// used to exercise the one-vs-rest path.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClasses {
    pub means: Vec<Vec<f64>>,
    pub sd: f64,
}

impl GaussianClasses {
    /// Balanced classes, labels `1..=L`, no oracle column.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let d = self.means[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instances = (0..n)
            .map(|_| {
                let l = rng.random_range(0..self.means.len());
                let x: Vec<f64> = self.means[l]
                    .iter()
                    .map(|m| m + self.sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                LabeledInstance::new(x, l as u32 + 1)
            })
            .collect();
        Dataset::new(d, instances)
    }

    /// Bayes posterior `P(y = l | x)` for `l = 1..=L` under equal priors.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = self
            .means
            .iter()
            .map(|m| -m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * self.sd * self.sd))
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|v| (v - top).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    /// Copy of `ds` whose oracle column holds `P(y = l | x)`.
    pub fn with_class_oracle(&self, ds: &Dataset, l: u32) -> Result<Dataset> {
        Dataset::new(
            ds.dim(),
            ds.iter()
                .map(|i| {
                    let p = self.posterior(&i.features)[l as usize - 1];
                    LabeledInstance::new(i.features.clone(), i.label).with_oracle(p)
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(study: Study, mode: TestMode) -> StudyConfig {
        StudyConfig::new(study, 200, mode, 0.1, 3, 7)
    }

    #[test]
    fn study1_covariance_entries() {
        let c = study1_cov();
        assert!((c[0][1] - 0.1).abs() < 1e-15);
        assert!((c[0][2] + 0.01).abs() < 1e-15);
        assert!((c[1][2] - 0.1).abs() < 1e-15);
        assert_eq!(c[2][2], 1.0);
    }

    #[test]
    fn shifted_distributions() {
        let t = cfg(Study::Study1, TestMode::Noniid).test_distribution().unwrap();
        assert_eq!(t.mean(), &[2.0, 1.0, -0.6]);
        let diag: Vec<f64> = (0..3).map(|i| t.cov()[i][i]).collect();
        for (d, want) in diag.iter().zip([0.5, 0.4, 0.3]) {
            assert!((d - want).abs() < 1e-15);
        }
        let mut c = cfg(Study::Study2Interaction, TestMode::Noniid);
        c.gamma = 2.0;
        let t = c.test_distribution().unwrap();
        assert_eq!(t.mean(), &[1.0, 1.0, 2.0]);
        assert_eq!(t.cov()[0][2], 0.0);
        assert!((t.cov()[0][1] - 0.1).abs() < 1e-15);
        let s2 = cfg(Study::Study2Predictor, TestMode::Iid).obs_distribution().unwrap();
        assert_eq!((s2.cov()[0][1], s2.cov()[1][0], s2.cov()[0][2], s2.cov()[2][0]), (0.1, 0.1, 0.0, 0.0));
    }

    #[test]
    fn zero_covariance_gives_the_mean() {
        let m = Mvn::new(vec![1.5, -2.0], vec![vec![0.0; 2]; 2]).unwrap();
        for row in sample_mvn(&m, 20, 3) {
            assert_eq!(row, vec![1.5, -2.0]);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = Mvn::new(vec![0.0; 3], study1_cov()).unwrap();
        assert_eq!(sample_mvn(&m, 50, 11), sample_mvn(&m, 50, 11));
        assert_ne!(sample_mvn(&m, 50, 11), sample_mvn(&m, 50, 12));
    }

    #[test]
    fn indefinite_and_asymmetric_covariances_rejected() {
        let bad = Mvn::new(vec![0.0; 2], vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(bad, Err(Error::NotPositiveSemidefinite)));
        let asym = Mvn::new(vec![0.0; 2], vec![vec![1.0, 0.2], vec![0.1, 1.0]]);
        assert!(asym.is_err());
        // rank one is fine
        let r1 = Mvn::new(vec![0.0; 2], vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        for row in sample_mvn(&r1, 10, 1) {
            assert!((row[0] - row[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_reproduces_covariance() {
        let c = shifted_cov();
        let m = Mvn::new(vec![0.0; 3], c.clone()).unwrap();
        let l = m.chol();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - c[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn interaction_with_zero_gamma_matches_plain_model() {
        let mut a = cfg(Study::Study2Interaction, TestMode::Iid);
        a.gamma = 0.0;
        let b = cfg(Study::Study2Predictor, TestMode::Iid);
        for x in [[0.3, -1.0, 2.0], [1.0, 1.0, 1.0], [-2.0, 0.5, -0.7]] {
            assert_eq!(a.true_logit(&x), b.true_logit(&x));
        }
    }

    #[test]
    fn generators_check_study() {
        assert!(generate_study1(&cfg(Study::Study2Predictor, TestMode::Iid), 0).is_err());
        assert!(generate_study2(&cfg(Study::Study1, TestMode::Iid), 0).is_err());
        let (obs, test) = generate_study1(&cfg(Study::Study1, TestMode::Iid), 0).unwrap();
        assert_eq!((obs.len(), test.len()), (200, 200));
        assert!(obs.oracle_probs().is_ok() && test.oracle_probs().is_ok());
    }

    #[test]
    fn config_json_defaults() {
        let c: StudyConfig = serde_json::from_str(
            r#"{"study":"study1","n_obs":1000,"test_mode":"iid","alpha":0.05,"replications":100,"base_seed":1}"#,
        )
        .unwrap();
        assert_eq!(c.n_test, 200);
        assert_eq!(c.effective_beta(), vec![0.0, 1.0, 1.0, 5.0]);
        assert_eq!(c.effective_models().len(), 3);
        assert_eq!(c.kernel, KernelConfig::default());
        let m: StudyConfig = serde_json::from_str(
            r#"{"study":"study2_interaction","n_obs":500,"test_mode":"noniid","alpha":0.1,"replications":2,"base_seed":1,
                "models":[{"name":"A","features":[0,2],"interactions":[[0,2]]}],"kernel":{"bandwidth":0.2}}"#,
        )
        .unwrap();
        assert_eq!(m.models[0].spec.interactions, vec![(0, 2)]);
        assert_eq!(m.kernel, KernelConfig::fixed(0.2));
        assert_eq!(
            m.effective_neighborhood().distance,
            DistanceSpec::WeightedProjection {
                weights: vec![1.0, 1.0, 1.0]
            }
        );
    }

    #[test]
    fn validation() {
        let mut c = cfg(Study::Study1, TestMode::Iid);
        assert!(c.validate().is_ok());
        c.replications = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(Study::Study1, TestMode::Iid);
        c.beta = Some(vec![1.0, 2.0]);
        assert!(c.validate().is_err());
        let mut c = cfg(Study::Study1, TestMode::Iid);
        c.models = vec![NamedModel::new("bad", ModelSpec::new(vec![5]))];
        assert!(c.validate().is_err());
    }

    #[test]
    fn failed_replications_are_counted() {
        // 8 observations: with a 50/50 split some draws fail to fit
        let mut c = cfg(Study::Study1, TestMode::Iid);
        c.n_obs = 4;
        c.replications = 20;
        let r = run_coverage_experiment(&c).unwrap();
        assert_eq!(r.succeeded + r.failed.len(), 20);
        assert!(!r.failed.is_empty());
    }

    #[test]
    fn posterior_sums_to_one() {
        let g = GaussianClasses {
            means: vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]],
            sd: 1.0,
        };
        let p = g.posterior(&[1.0, 1.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[1] - p[2]).abs() < 1e-12);
        let ds = g.sample(300, 5).unwrap();
        let counts = ds.class_counts();
        assert_eq!(counts.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn sweep_runs_each_size() {
        let cfg = StudyConfig::new(Study::Study1, 0, TestMode::Iid, 0.1, 2, 4);
        let sweep = run_sample_size_sweep(&cfg, &[200, 400]).unwrap();
        assert_eq!(sweep.iter().map(|(n, r)| (*n, r.config.n_obs)).collect::<Vec<_>>(), [(200, 200), (400, 400)]);
        let mut out = Vec::new();
        write_sweep_csv(&sweep, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("n_obs,model,k,replications,mean_cov_pi"));
        // three default models, two classes, two sizes
        assert_eq!(text.lines().count(), 1 + 3 * 2 * 2);
        assert!(run_sample_size_sweep(&cfg, &[]).is_err());
    }
}
