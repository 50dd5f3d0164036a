//! Probability scorers: the abstract `p_n(.)` interface plus a logistic
//! regression trainer fitted by iteratively reweighted least squares.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any logit.
pub const PROB_EPS: f64 = 1e-10;

/// Convergence threshold on the max-norm of the log-likelihood gradient.
pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITERATIONS: usize = 100;
/// Ridge added to the diagonal of the weighted normal equations.
pub const IRLS_JITTER: f64 = 1e-10;
/// Bound on every coefficient magnitude.
pub const COEFFICIENT_CLAMP: f64 = 30.0;

// Newton steps larger than this (max-norm) keep the fit from being declared
// converged even with a tiny gradient; separated data produces O(1) steps
// forever while the gradient vanishes.
const STEP_TOLERANCE: f64 = 1e-6;
const MAX_STEP_HALVINGS: usize = 50;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `ln(p / (1 - p))` after clamping `p` into `[PROB_EPS, 1 - PROB_EPS]`.
pub fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    p.ln() - (-p).ln_1p()
}

/// `1 / (1 + exp(-z))`; maps `-inf` to 0 and `+inf` to 1.
pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Anything that maps a feature vector to a class-1 probability.
pub trait ProbabilityScorer: Send + Sync {
    /// Dimension of the feature vectors this scorer accepts.
    fn dim(&self) -> usize;

    /// Probability in `[PROB_EPS, 1 - PROB_EPS]`.
    fn score(&self, features: &[f64]) -> Result<f64>;

    fn score_all(&self, ds: &Dataset) -> Result<Vec<f64>> {
        ds.iter().map(|inst| self.score(&inst.features)).collect()
    }
}

impl<S: ProbabilityScorer + ?Sized> ProbabilityScorer for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, features: &[f64]) -> Result<f64> {
        (**self).score(features)
    }
}

impl<S: ProbabilityScorer + ?Sized> ProbabilityScorer for Box<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, features: &[f64]) -> Result<f64> {
        (**self).score(features)
    }
}

impl<S: ProbabilityScorer + ?Sized> ProbabilityScorer for Arc<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, features: &[f64]) -> Result<f64> {
        (**self).score(features)
    }
}

/// Wraps a plain function as a scorer. Output is clamped.
pub struct FnScorer<F> {
    dim: usize,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ProbabilityScorer for FnScorer<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, features: &[f64]) -> Result<f64> {
        check_dim(self.dim, features)?;
        Ok(clamp_prob((self.f)(features)))
    }
}

fn check_dim(expected: usize, features: &[f64]) -> Result<()> {
    if features.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            got: features.len(),
        })
    }
}

fn default_true() -> bool {
    true
}

/// Which columns (and pairwise products) enter the linear predictor.
///
/// JSON form: `{"features":[0,2], "interactions":[[0,2]], "intercept":true}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub features: Vec<usize>,
    #[serde(default)]
    pub interactions: Vec<(usize, usize)>,
    #[serde(default = "default_true")]
    pub intercept: bool,
}

impl ModelSpec {
    pub fn new(features: Vec<usize>) -> Self {
        Self {
            features,
            interactions: Vec::new(),
            intercept: true,
        }
    }

    /// Every column of a `dim`-dimensional input plus an intercept.
    pub fn all_features(dim: usize) -> Self {
        Self::new((0..dim).collect())
    }

    pub fn with_interaction(mut self, a: usize, b: usize) -> Self {
        self.interactions.push((a, b));
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(&bad) = self.features.iter().find(|&&i| i >= dim) {
            return Err(Error::InvalidSpec(format!(
                "feature index {bad} outside [0,{dim})"
            )));
        }
        if let Some(&(a, b)) = self.interactions.iter().find(|&&(a, b)| a >= dim || b >= dim) {
            return Err(Error::InvalidSpec(format!(
                "interaction ({a},{b}) outside [0,{dim})"
            )));
        }
        if self.n_columns() == 0 {
            return Err(Error::InvalidSpec("model has no columns".into()));
        }
        Ok(())
    }

    /// Width of the design matrix.
    pub fn n_columns(&self) -> usize {
        usize::from(self.intercept) + self.features.len() + self.interactions.len()
    }

    /// Design row: intercept (if any), selected features, then interaction
    /// products, in that order.
    pub fn design_row(&self, x: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.n_columns());
        if self.intercept {
            row.push(1.0);
        }
        row.extend(self.features.iter().map(|&i| x[i]));
        row.extend(self.interactions.iter().map(|&(a, b)| x[a] * x[b]));
        row
    }
}

/// A fitted logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first when the spec has one.
    pub coefficients: Vec<f64>,
    pub spec: ModelSpec,
    pub dim: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood after each accepted iterate, starting at all-zero
    /// coefficients.
    pub log_likelihood: Vec<f64>,
}

impl LogisticFit {
    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x)?;
        Ok(self
            .spec
            .design_row(x)
            .iter()
            .zip(&self.coefficients)
            .map(|(a, b)| a * b)
            .sum())
    }
}

impl ProbabilityScorer for LogisticFit {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, features: &[f64]) -> Result<f64> {
        Ok(clamp_prob(expit(self.linear_predictor(features)?)))
    }
}

/// `expit` of the fitted linear predictor, clamped.
pub fn score(fit: &LogisticFit, x: &[f64]) -> Result<f64> {
    fit.score(x)
}

fn log_likelihood(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y.iter())
        .map(|(&e, &yi)| yi * e - softplus(e))
        .sum()
}

/// Maximum-likelihood logistic regression via IRLS (Newton-Raphson with
/// step halving, so the log-likelihood never decreases).
///
/// Converges when the gradient max-norm is at most [`IRLS_TOLERANCE`] and
/// the Newton step has become negligible. Separated data drives the
/// coefficients into the ±[`COEFFICIENT_CLAMP`] box and is reported with
/// `converged = false`, as is a singular weighted design.
pub fn fit_logistic(train: &Dataset, spec: &ModelSpec) -> Result<LogisticFit> {
    train.ensure_non_empty()?;
    train.ensure_binary()?;
    spec.validate(train.dim())?;
    let counts = train.class_counts();
    if counts.len() < 2 {
        return Err(Error::SingleClass);
    }

    let n = train.len();
    let p = spec.n_columns();
    let rows: Vec<f64> = train
        .iter()
        .flat_map(|inst| spec.design_row(&inst.features))
        .collect();
    let x = DMatrix::from_row_slice(n, p, &rows);
    let y = DVector::from_iterator(n, train.labels().map(f64::from));

    let mut beta = DVector::zeros(p);
    let mut ll = log_likelihood(&x, &y, &beta);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < IRLS_MAX_ITERATIONS {
        let eta = &x * &beta;
        let prob = eta.map(expit);
        let weights = prob.map(|q| q * (1.0 - q));
        let grad = x.transpose() * (&y - &prob);

        let mut xtwx = x.transpose() * DMatrix::from_diagonal(&weights) * &x;
        for j in 0..p {
            xtwx[(j, j)] += IRLS_JITTER;
        }
        let Some(chol) = xtwx.cholesky() else {
            log::warn!("weighted design is singular; stopping IRLS");
            break;
        };
        let step = chol.solve(&grad);
        if grad.amax() <= IRLS_TOLERANCE && step.amax() <= STEP_TOLERANCE {
            converged = true;
            break;
        }
        iterations += 1;

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_STEP_HALVINGS {
            let candidate =
                (&beta + &step * t).map(|b| b.clamp(-COEFFICIENT_CLAMP, COEFFICIENT_CLAMP));
            let cand_ll = log_likelihood(&x, &y, &candidate);
            if cand_ll >= ll {
                beta = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no ascent direction left at working precision
            converged = grad.amax() <= IRLS_TOLERANCE;
            break;
        }
        trace.push(ll);
    }

    let clamped = beta.iter().any(|b| b.abs() >= COEFFICIENT_CLAMP);
    if clamped {
        log::warn!("logistic coefficients hit the ±{COEFFICIENT_CLAMP} clamp (separated data?)");
    }
    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        spec: spec.clone(),
        dim: train.dim(),
        converged: converged && !clamped,
        iterations,
        log_likelihood: trace,
    })
}
