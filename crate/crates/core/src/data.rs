//! Seeded synthetic classification tasks, a tabular loader and batching.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

/// A train/test pair drawn from one generator call.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

/// One minibatch, materialised. `indices` refer to rows of the source
/// dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if !features.is_matrix() || features.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {bad} >= class count {classes}")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            split,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Shuffles row indices with a stream seeded by `(seed, epoch)` and cuts
    /// them into contiguous batches; the last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let epoch_seed = rng::derive_seed(rng::derive_seed(seed, stream::SHUFFLE), epoch as u64);
        order.shuffle(&mut rng::rng(epoch_seed));
        order
            .chunks(batch_size)
            .map(|idx| {
                Ok(Batch {
                    features: self.features.select_rows(idx)?,
                    labels: idx.iter().map(|&i| self.labels[i]).collect(),
                    indices: idx.to_vec(),
                })
            })
            .collect()
    }
}

/// Assembles a stratified split: for each class, the first `n_train` of its
/// (already shuffled) samples go to train, the rest to test.
fn split_per_class(
    per_class: Vec<Vec<Vec<f64>>>,
    dim: usize,
    train_fraction: f64,
) -> Result<TaskData> {
    let classes = per_class.len();
    let mut parts = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for (label, samples) in per_class.into_iter().enumerate() {
        let n = samples.len();
        let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
        for (i, x) in samples.into_iter().enumerate() {
            let part = &mut parts[usize::from(i >= n_train)];
            part.0.extend(x);
            part.1.push(label);
        }
    }
    let [(xtr, ytr), (xte, yte)] = parts;
    Ok(TaskData {
        train: Dataset::new(Tensor::matrix(ytr.len(), dim, xtr)?, ytr, classes, Split::Train)?,
        test: Dataset::new(Tensor::matrix(yte.len(), dim, xte)?, yte, classes, Split::Test)?,
    })
}

const TRAIN_FRACTION: f64 = 0.8;

/// Isotropic Gaussian blobs. Class means lie on the unit sphere in
/// directions drawn from the seed; samples are `mean + spread·N(0, I)`.
/// Each class is split 80/20 into train and test.
pub fn gaussian_mixture(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<TaskData> {
    if classes < 2 || dim < 2 || n_per_class < 2 {
        return Err(Error::contract(format!(
            "gaussian_mixture needs classes >= 2, dim >= 2, n_per_class >= 2 (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::contract(format!("spread must be positive, got {spread}")));
    }
    let mut mean_rng = rng::rng(rng::derive_seed(seed, stream::CLASS_MEANS));
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut mean_rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let mut sample_rng = rng::rng(rng::derive_seed(seed, stream::SAMPLES));
    let per_class = means
        .iter()
        .map(|mean| {
            (0..n_per_class)
                .map(|_| {
                    mean.iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut sample_rng);
                            m + spread * z
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    split_per_class(per_class, dim, TRAIN_FRACTION)
}

/// Interleaved two-dimensional spiral arms, one per class, with Gaussian
/// angular noise. Arm `c` starts at angle `2πc/classes` and winds 0.75 turns
/// as the radius grows from `1/n` to 1.
pub fn spirals(classes: usize, n_per_class: usize, noise: f64, seed: u64) -> Result<TaskData> {
    if classes < 2 || n_per_class < 2 {
        return Err(Error::contract(format!(
            "spirals needs classes >= 2 and n_per_class >= 2 (got {classes}, {n_per_class})"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::contract(format!("noise must be nonnegative, got {noise}")));
    }
    let mut sample_rng = rng::rng(rng::derive_seed(seed, stream::SAMPLES));
    let per_class = (0..classes)
        .map(|c| {
            let offset = 2.0 * PI * c as f64 / classes as f64;
            let mut arm: Vec<Vec<f64>> = (0..n_per_class)
                .map(|i| {
                    let r = (i + 1) as f64 / n_per_class as f64;
                    let z: f64 = StandardNormal.sample(&mut sample_rng);
                    let theta = offset + 1.5 * PI * r + noise * z;
                    vec![r * theta.cos(), r * theta.sin()]
                })
                .collect();
            // Points are generated along the arm; shuffle so the split is not
            // a radius cut.
            arm.shuffle(&mut sample_rng);
            arm
        })
        .collect();
    split_per_class(per_class, 2, TRAIN_FRACTION)
}

/// Parses `label,feat1,...,featd` rows (no header) and standardises every
/// feature column to zero mean and unit population variance. Constant
/// columns are only centred.
pub fn parse_tabular(text: &str, classes: usize) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        let d = *width.get_or_insert(fields.len() - 1);
        if d == 0 {
            return Err(Error::Parse {
                line,
                message: "row has a label but no features".into(),
            });
        }
        if fields.len() - 1 != d {
            return Err(Error::Parse {
                line,
                message: format!("expected {d} features, found {}", fields.len() - 1),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("label `{}` is not a nonnegative integer", fields[0]),
        })?;
        if label >= classes {
            return Err(Error::Parse {
                line,
                message: format!("label {label} >= class count {classes}"),
            });
        }
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature `{f}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("feature `{f}` is not finite"),
                });
            }
            values.push(v);
        }
    }
    let d = width.ok_or_else(|| Error::Parse {
        line: 0,
        message: "no data rows".into(),
    })?;
    let n = labels.len();
    for j in 0..d {
        let mean = (0..n).map(|i| values[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (values[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            values[i * d + j] = (values[i * d + j] - mean) / sd;
        }
    }
    Dataset::new(Tensor::matrix(n, d, values)?, labels, classes, Split::Train)
}

pub fn load_tabular(path: impl AsRef<Path>, classes: usize) -> Result<Dataset> {
    parse_tabular(&fs::read_to_string(path)?, classes)
}
