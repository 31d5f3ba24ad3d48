//! Dataset construction: synthetic Gaussian mixtures, exponential
//! long-tail subsampling, batch iteration, and input mixing.
//!
//! Class indices are ordered by decreasing frequency: class 0 is the most
//! frequent, class `c - 1` the rarest. The long-tail curve keeps
//! `n_i = round(base * IF^(-i/(c-1)))` samples of class i (floor of 1),
//! which matches both endpoints of the imbalance factor
//! `IF = n_max / n_min`.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::matrix::{norm2, Matrix};
use crate::numkit::qr::qr_orthonormal;
use crate::numkit::rng::Rng;

/// Feature matrix (`n x d`), integer labels, per-class counts.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    /// Validates labels and computes class counts.
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let mut class_counts = vec![0usize; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::InvalidSpec(format!(
                    "label {y} out of range (c={num_classes})"
                )));
            }
            class_counts[y] += 1;
        }
        Ok(Dataset {
            features,
            labels,
            class_counts,
            num_classes,
        })
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

    /// Classes holding the minimum count (the designated minority set).
    pub fn rarest_classes(&self) -> Vec<usize> {
        let min = self.class_counts.iter().copied().min().unwrap_or(0);
        (0..self.num_classes)
            .filter(|&i| self.class_counts[i] == min)
            .collect()
    }
}

/// Exponential long-tail specification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LongTailSpec {
    /// `IF = n_max / n_min >= 1`.
    pub imbalance_factor: f64,
    /// Count of the most frequent class.
    pub base_count: usize,
}

impl LongTailSpec {
    /// Per-class target counts, most frequent first. Round half-up, floor 1.
    pub fn target_counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        if self.imbalance_factor < 1.0 {
            return Err(Error::InvalidSpec(format!(
                "imbalance factor {} must be >= 1",
                self.imbalance_factor
            )));
        }
        if self.base_count == 0 {
            return Err(Error::InvalidSpec("base count must be >= 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidSpec("long tail needs c >= 2".into()));
        }
        Ok((0..num_classes)
            .map(|i| {
                let exponent = -(i as f64) / (num_classes as f64 - 1.0);
                let target = self.base_count as f64 * self.imbalance_factor.powf(exponent);
                (target.round() as usize).max(1)
            })
            .collect())
    }
}

/// One mini-batch: copied feature rows, labels, and per-class counts
/// within the batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub batch_counts: Vec<usize>,
}

/// Draws `counts[i]` samples of class i from `N(mean_scale * mu_i, I_d)`,
/// where the `mu_i` are orthonormal directions from a seeded QR when
/// `d >= c` and independent random unit vectors otherwise. Samples are
/// grouped by class, class 0 first.
pub fn synth_gaussian_mixture(
    rng: &mut Rng,
    num_classes: usize,
    dim: usize,
    counts: &[usize],
    mean_scale: f64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidSpec("mixture needs c >= 2".into()));
    }
    if counts.len() != num_classes {
        return Err(Error::InvalidSpec(format!(
            "{} counts for {} classes",
            counts.len(),
            num_classes
        )));
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidSpec(
            "every class needs at least one sample".into(),
        ));
    }

    let means = class_means(rng, num_classes, dim)?;
    let n: usize = counts.iter().sum();
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (i, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for (l, v) in features.row_mut(row).iter_mut().enumerate() {
                *v = mean_scale * means[(i, l)] + rng.normal();
            }
            labels.push(i);
            row += 1;
        }
    }
    Dataset::new(features, labels, num_classes)
}

/// Orthonormal class-mean directions (rows), falling back to independent
/// unit vectors when the ambient dimension cannot hold `c` orthonormal
/// directions.
fn class_means(rng: &mut Rng, c: usize, d: usize) -> Result<Matrix> {
    if d >= c {
        let q = qr_orthonormal(&rng.gaussian_matrix(d, c))?;
        Ok(q.transpose())
    } else {
        let mut m = rng.gaussian_matrix(c, d);
        for i in 0..c {
            let n = norm2(m.row(i)).max(1e-300);
            for v in m.row_mut(i) {
                *v /= n;
            }
        }
        Ok(m)
    }
}

/// Subsamples a dataset down the exponential long-tail curve. Kept samples
/// are chosen uniformly without replacement per class and retain their
/// original relative order; feature values are untouched.
pub fn apply_longtail(ds: &Dataset, spec: &LongTailSpec, rng: &mut Rng) -> Result<Dataset> {
    let targets = spec.target_counts(ds.num_classes)?;
    for (i, (&have, &want)) in ds.class_counts.iter().zip(&targets).enumerate() {
        if have < want {
            return Err(Error::InvalidSpec(format!(
                "class {i} has {have} samples but the curve needs {want}"
            )));
        }
    }

    let mut keep: Vec<usize> = Vec::new();
    for class in 0..ds.num_classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&j| ds.labels[j] == class).collect();
        rng.shuffle(&mut idx);
        let mut chosen: Vec<usize> = idx.into_iter().take(targets[class]).collect();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.sort_unstable();

    let mut features = Matrix::zeros(keep.len(), ds.dim());
    let mut labels = Vec::with_capacity(keep.len());
    for (row, &j) in keep.iter().enumerate() {
        features.row_mut(row).copy_from_slice(ds.features.row(j));
        labels.push(ds.labels[j]);
    }
    Dataset::new(features, labels, ds.num_classes)
}

/// Lazy epoch iterator: visits every sample exactly once, last batch may
/// be short. The visit order is fixed at construction (shuffled or not),
/// so the iterator itself draws no randomness.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;

        let mut features = Matrix::zeros(idx.len(), self.ds.dim());
        let mut labels = Vec::with_capacity(idx.len());
        let mut batch_counts = vec![0usize; self.ds.num_classes];
        for (row, &j) in idx.iter().enumerate() {
            features
                .row_mut(row)
                .copy_from_slice(self.ds.features.row(j));
            labels.push(self.ds.labels[j]);
            batch_counts[self.ds.labels[j]] += 1;
        }
        Some(Batch {
            features,
            labels,
            batch_counts,
        })
    }
}

pub fn iterate_batches<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    shuffle: bool,
    rng: &mut Rng,
) -> BatchIter<'a> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    BatchIter {
        ds,
        order,
        pos: 0,
        batch_size,
    }
}

/// A convexly mixed batch with its two label sets. Losses consume it in
/// the two-label weighted form `lam * L(labels_a) + (1 - lam) * L(labels_b)`.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub features: Matrix,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub lambda: f64,
}

/// Mixes a batch with a shuffled copy of itself: one `lambda ~ Beta(alpha,
/// alpha)` per batch, `x' = lam * x_a + (1 - lam) * x_b`.
pub fn mixup(batch: &Batch, alpha: f64, rng: &mut Rng) -> MixedBatch {
    assert!(alpha > 0.0);
    let lambda = rng.beta(alpha, alpha);
    mixup_with_lambda(batch, lambda, rng)
}

/// Same as [`mixup`] with the mixing weight supplied (endpoint tests).
pub fn mixup_with_lambda(batch: &Batch, lambda: f64, rng: &mut Rng) -> MixedBatch {
    let b = batch.labels.len();
    let mut perm: Vec<usize> = (0..b).collect();
    rng.shuffle(&mut perm);
    let mut features = Matrix::zeros(b, batch.features.cols());
    let mut labels_b = Vec::with_capacity(b);
    for j in 0..b {
        let pj = perm[j];
        for (l, v) in features.row_mut(j).iter_mut().enumerate() {
            *v = lambda * batch.features[(j, l)] + (1.0 - lambda) * batch.features[(pj, l)];
        }
        labels_b.push(batch.labels[pj]);
    }
    MixedBatch {
        features,
        labels_a: batch.labels.clone(),
        labels_b,
        lambda,
    }
}
