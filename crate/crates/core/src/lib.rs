//! Conformal confidence bands for ROC curves.
//!
//! A logistic scorer `p_n` is fitted on one half of the observed data. The
//! other half gives logit-space residuals against a kernel estimate of the
//! class probability. Order statistics of those residuals bound each test
//! point's probability, and counting interval ends above a threshold bounds
//! the TPR and FPR at that threshold.
//!
//! * [`band_iid`]: test data from the observed distribution.
//! * [`noniid::band_noniid`]: covariate-shifted test data, with residual
//!   pools restricted to a neighbourhood of each test point.
//! * [`multilabel::band_multilabel`]: one-vs-rest bands for `L` classes.
//! * [`sim`]: generators and a coverage harness for simulation studies.

pub mod conformal;
pub mod data;
pub mod error;
pub mod kernel;
pub mod model;
pub mod multilabel;
pub mod noniid;
pub mod roc;
pub mod sim;

pub use conformal::{
    class_conditional_interval, compute_oracle_scores, compute_scores, order_quantile,
    prediction_interval, ConformityScoreSet, IndividualInterval, QuantileSide,
};
pub use data::{load_csv, split, Dataset, DataSplit, LabeledInstance};
pub use error::{Error, Result};
pub use kernel::{estimate_pi_tilde, Bandwidth, KernelConfig, KernelEstimator};
pub use model::{expit, fit_logistic, logit, LogisticFit, ModelSpec, ProbabilityScorer};
pub use roc::{
    band_iid, default_lambda_grid, oracle_roc, roc_curve, BandMode, BandResult, BandSettings,
    LambdaGrid, RocBand, RocCurve,
};
