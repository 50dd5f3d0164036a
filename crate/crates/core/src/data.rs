//! Labeled datasets, CSV ingestion, seeded train/calibration splitting and
//! class partitioning.
//!
//! A [`Dataset`] is immutable once built. Every operation here preserves the
//! original row order, so seeded runs reproduce byte-for-byte.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Name of the optional CSV column holding the known class-1 probability.
pub const ORACLE_COLUMN: &str = "oracle_prob";

/// Default fraction of observed data used for training.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.5;

/// One observation: covariates, class label and (in simulations) the true
/// class-1 probability.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub features: Vec<f64>,
    pub label: u32,
    pub oracle_prob: Option<f64>,
}

impl LabeledInstance {
    pub fn new(features: Vec<f64>, label: u32) -> Self {
        Self {
            features,
            label,
            oracle_prob: None,
        }
    }

    pub fn with_oracle(mut self, prob: f64) -> Self {
        self.oracle_prob = Some(prob);
        self
    }
}

/// An ordered collection of instances sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<LabeledInstance>,
    dim: usize,
}

impl Dataset {
    /// Builds a dataset, checking dimensions and oracle probabilities.
    pub fn new(dim: usize, instances: Vec<LabeledInstance>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "feature dimension must be positive".into(),
            ));
        }
        for inst in &instances {
            if inst.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: inst.features.len(),
                });
            }
            if let Some(p) = inst.oracle_prob {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::OracleOutOfRange(p));
                }
            }
        }
        Ok(Self { instances, dim })
    }

    /// Builds a dataset whose dimension is taken from the first instance.
    pub fn from_instances(instances: Vec<LabeledInstance>) -> Result<Self> {
        let dim = instances
            .first()
            .map(|i| i.features.len())
            .ok_or(Error::EmptyDataset)?;
        Self::new(dim, instances)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledInstance> {
        self.instances.iter()
    }

    pub fn get(&self, index: usize) -> Option<&LabeledInstance> {
        self.instances.get(index)
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.instances.iter().map(|i| i.label)
    }

    /// Number of instances per label, in ascending label order.
    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for label in self.labels() {
            *counts.entry(label).or_insert(0) += 1;
        }
        counts
    }

    /// Copies the instances at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            dim: self.dim,
        }
    }

    /// Replaces every label with `1(label == target)`.
    pub fn one_vs_rest(&self, target: u32) -> Dataset {
        Dataset {
            instances: self
                .instances
                .iter()
                .map(|inst| LabeledInstance {
                    label: u32::from(inst.label == target),
                    ..inst.clone()
                })
                .collect(),
            dim: self.dim,
        }
    }

    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }

    /// Fails with "label not in {0,1}" on the first non-binary label.
    pub fn ensure_binary(&self) -> Result<()> {
        match self.labels().find(|&l| l > 1) {
            Some(l) => Err(Error::NonBinaryLabel(l)),
            None => Ok(()),
        }
    }

    /// Oracle probabilities for every instance, or the index of the first
    /// instance lacking one.
    pub fn oracle_probs(&self) -> Result<Vec<f64>> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| inst.oracle_prob.ok_or(Error::MissingOracle(i)))
            .collect()
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a LabeledInstance;
    type IntoIter = std::slice::Iter<'a, LabeledInstance>;

    fn into_iter(self) -> Self::IntoIter {
        self.instances.iter()
    }
}

/// Disjoint training and calibration parts of an observed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub calib: Dataset,
    pub train_indices: Vec<usize>,
    pub calib_indices: Vec<usize>,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Uniform random partition without replacement. `|train| = round(f * n)`,
/// and both parts keep the original row order.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(
            "train fraction must be in (0,1)".into(),
        ));
    }
    let n = ds.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n < 4 || n_train < 2 || n - n_train < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} instances cannot give training and calibration parts of at least 2"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (head, tail) = order.split_at(n_train);
    let mut train_indices = head.to_vec();
    let mut calib_indices = tail.to_vec();
    train_indices.sort_unstable();
    calib_indices.sort_unstable();

    Ok(DataSplit {
        train: ds.subset(&train_indices),
        calib: ds.subset(&calib_indices),
        train_indices,
        calib_indices,
        seed,
        train_fraction,
    })
}

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer),
/// giving independent, order-free seeds for replications and per-point
/// resplits.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits into (instances with `label == k`, the rest), order preserved.
pub fn partition_by_class(ds: &Dataset, k: u32) -> (Dataset, Dataset) {
    let (hit, rest): (Vec<_>, Vec<_>) = ds.instances.iter().cloned().partition(|i| i.label == k);
    (
        Dataset {
            instances: hit,
            dim: ds.dim,
        },
        Dataset {
            instances: rest,
            dim: ds.dim,
        },
    )
}

fn parse_label(raw: &str, row: usize, column: &str) -> Result<u32> {
    let err = || Error::Parse {
        row,
        column: column.to_string(),
        value: raw.to_string(),
        expected: "a non-negative integer label",
    };
    if let Ok(v) = raw.parse::<u32>() {
        return Ok(v);
    }
    // accept integral reals such as "1.0"
    let v: f64 = raw.parse().map_err(|_| err())?;
    if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
        Ok(v as u32)
    } else {
        Err(err())
    }
}

/// Reads a headed, comma-separated file. Every column other than the label
/// column and `oracle_prob` is a feature, in file order.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, label_column)
}

/// [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, label_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_string()))?;
    let oracle_idx = headers.iter().position(|h| h == ORACLE_COLUMN);
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_idx && Some(i) != oracle_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::InvalidParameter("no feature columns".into()));
    }

    let mut instances = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(Error::RowWidth {
                row,
                expected: headers.len(),
                got: record.len(),
            });
        }
        let label = parse_label(&record[label_idx], row, label_column)?;
        let features = feature_idx
            .iter()
            .map(|&c| {
                record[c].parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    column: headers[c].to_string(),
                    value: record[c].to_string(),
                    expected: "a number",
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let oracle_prob = match oracle_idx {
            Some(c) if !record[c].is_empty() => {
                Some(record[c].parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    column: ORACLE_COLUMN.to_string(),
                    value: record[c].to_string(),
                    expected: "a probability",
                })?)
            }
            _ => None,
        };
        instances.push(LabeledInstance {
            features,
            label,
            oracle_prob,
        });
    }
    Dataset::new(feature_idx.len(), instances)
}
