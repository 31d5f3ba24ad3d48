//! Softmax losses and their exact gradients.
//!
//! Two losses share one code path. Plain cross-entropy for a sample with
//! truth class `t`:
//!
//! ```text
//! L = -log( exp(z_t) / sum_k exp(z_k) )
//! ```
//!
//! The count-balanced variant weights each denominator term by the class
//! cardinality ratio `n_k / n_t`:
//!
//! ```text
//! L = -log( exp(z_t) / sum_k (n_k / n_t) exp(z_k) )
//! ```
//!
//! which equalizes the per-class coefficients of the classifier-weight
//! gradient (every attraction and repulsion term ends up scaled by `n_t`).
//! With uniform counts the ratios are exactly 1 and both losses coincide
//! bitwise.
//!
//! All internal exponentials are shifted by the max of `z_k + log(n_k/n_t)`
//! so count ratios are effectively handled in log-space and the denominator
//! is always >= 1: no overflow for any finite logits or counts.
//!
//! Gradient conventions: per-sample logit gradients are raw (`dL_j/dz_j`);
//! [`classifier_gradient`] reports the gradient of the **batch-summed**
//! loss, matching the per-class decomposition
//!
//! ```text
//! dL/dw_i = attraction_i + sum_{k != i} repulsion_{i,k}
//! attraction_i     = sum_{j in class i} g_{j,i} h_j      (g_{j,i} <= 0)
//! repulsion_{i,k}  = sum_{j in class k} g_{j,i} h_j      (g_{j,i} >= 0)
//! ```
//!
//! Trainers that step on batch-mean losses divide by the batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::matrix::{norm2, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Ce,
    Arb,
}

/// Where the cardinalities used by the balanced loss come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountsMode {
    /// Counts collected from each mini-batch; classes absent from the batch
    /// drop out of the denominator (their count is zero).
    BatchLocal,
    /// Counts of the whole training set; all strictly positive.
    Global,
}

/// Per-class cardinalities used by the balanced loss.
///
/// A zero count marks a class absent from the current batch: it contributes
/// nothing to any denominator and receives a zero logit gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    counts: Vec<f64>,
    pub mode: CountsMode,
}

impl ClassCounts {
    /// Whole-training-set counts; every class must be populated.
    pub fn global(counts: &[usize]) -> Result<ClassCounts> {
        if counts.iter().any(|&n| n == 0) {
            return Err(Error::InvalidSpec(
                "global class counts must all be positive".into(),
            ));
        }
        Ok(ClassCounts {
            counts: counts.iter().map(|&n| n as f64).collect(),
            mode: CountsMode::Global,
        })
    }

    /// Batch-local counts; absent classes get count zero.
    pub fn from_labels(labels: &[usize], num_classes: usize) -> ClassCounts {
        let mut counts = vec![0.0; num_classes];
        for &y in labels {
            counts[y] += 1.0;
        }
        ClassCounts {
            counts,
            mode: CountsMode::BatchLocal,
        }
    }

    pub fn uniform(num_classes: usize) -> ClassCounts {
        ClassCounts {
            counts: vec![1.0; num_classes],
            mode: CountsMode::Global,
        }
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

/// Count-balanced softmax for a sample whose truth class is `truth`:
/// `p_i = exp(z_i) / sum_k (n_k / n_truth) exp(z_k)`.
///
/// The entries do **not** sum to 1 in general; the weighted sum
/// `sum_i (n_i / n_truth) p_i` does. With uniform counts this is exactly
/// [`softmax`].
pub fn arb_softmax(z: &[f64], counts: &ClassCounts, truth: usize) -> Vec<f64> {
    let (m, den) = shifted_denominator(z, counts, truth);
    z.iter().map(|&v| (v - m).exp() / den).collect()
}

/// Max-shift and shifted denominator for the balanced softmax.
/// Returns `(m, den)` with `m = max_k (z_k + log(n_k/n_truth))` over
/// populated classes and `den = sum_k exp(z_k + log(n_k/n_truth) - m)`.
fn shifted_denominator(z: &[f64], counts: &ClassCounts, truth: usize) -> (f64, f64) {
    let n = counts.counts();
    assert_eq!(z.len(), n.len(), "logit/count length mismatch");
    assert!(n[truth] > 0.0, "truth class has zero count");
    let ln_nt = n[truth].ln();
    let mut m = f64::NEG_INFINITY;
    for (k, &nk) in n.iter().enumerate() {
        if nk > 0.0 {
            m = m.max(z[k] + (nk.ln() - ln_nt));
        }
    }
    let mut den = 0.0;
    for (k, &nk) in n.iter().enumerate() {
        if nk > 0.0 {
            den += (z[k] + (nk.ln() - ln_nt) - m).exp();
        }
    }
    (m, den.max(1e-300))
}

fn ce_sample_loss(z: &[f64], truth: usize) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let den: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    -(z[truth] - m) + den.ln()
}

fn arb_sample_loss(z: &[f64], counts: &ClassCounts, truth: usize) -> f64 {
    let (m, den) = shifted_denominator(z, counts, truth);
    -(z[truth] - m) + den.ln()
}

/// Mean cross-entropy over a batch of logits (`b x c`).
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len());
    let b = labels.len();
    let total: f64 = (0..b).map(|j| ce_sample_loss(logits.row(j), labels[j])).sum();
    total / b as f64
}

/// Mean balanced loss over a batch. Can be negative when the truth class
/// holds the largest count: the denominator weights are then all <= 1, so
/// the log argument may exceed 1.
pub fn arb_loss(logits: &Matrix, labels: &[usize], counts: &ClassCounts) -> f64 {
    assert_eq!(logits.rows(), labels.len());
    let b = labels.len();
    let total: f64 = (0..b)
        .map(|j| arb_sample_loss(logits.row(j), counts, labels[j]))
        .sum();
    total / b as f64
}

/// Mean loss of either kind.
pub fn mean_loss(kind: LossKind, logits: &Matrix, labels: &[usize], counts: &ClassCounts) -> f64 {
    match kind {
        LossKind::Ce => ce_loss(logits, labels),
        LossKind::Arb => arb_loss(logits, labels, counts),
    }
}

/// Per-sample gradient `dL_j/dz_j`.
///
/// Cross-entropy: `g_i = p_i - [i == truth]`. Balanced: the truth entry is
/// `-(1 - p_truth)` and cross entries are `(n_i/n_truth) p_i` with `p` the
/// balanced softmax (zero for absent classes). Both sum to 0.
pub fn logit_gradient(
    kind: LossKind,
    z: &[f64],
    truth: usize,
    counts: &ClassCounts,
) -> Vec<f64> {
    match kind {
        LossKind::Ce => {
            let mut g = softmax(z);
            g[truth] -= 1.0;
            g
        }
        LossKind::Arb => {
            let n = counts.counts();
            let (m, den) = shifted_denominator(z, counts, truth);
            let ln_nt = n[truth].ln();
            let mut g = vec![0.0; z.len()];
            for (i, gi) in g.iter_mut().enumerate() {
                if n[i] > 0.0 {
                    // (n_i/n_truth) p_i, fused in log-space; each term <= 1.
                    *gi = (z[i] + (n[i].ln() - ln_nt) - m).exp() / den;
                }
            }
            g[truth] = (z[truth] - m).exp() / den - 1.0;
            g
        }
    }
}

/// Gradient of the per-sample loss with respect to the feature vector:
/// `dL_j/dh_j = Wᵀ g` where `g` is the logit gradient and `w` holds the
/// class vectors as rows (`c x d`).
pub fn feature_gradient(
    kind: LossKind,
    z: &[f64],
    truth: usize,
    counts: &ClassCounts,
    w: &Matrix,
) -> Vec<f64> {
    let g = logit_gradient(kind, z, truth, counts);
    let mut out = vec![0.0; w.cols()];
    for (i, &gi) in g.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += gi * wv;
        }
    }
    out
}

/// Per-sample logit gradients for a whole batch, stacked as `b x c` rows.
pub fn batch_logit_gradients(
    kind: LossKind,
    logits: &Matrix,
    labels: &[usize],
    counts: &ClassCounts,
) -> Matrix {
    let (b, c) = (logits.rows(), logits.cols());
    let mut g = Matrix::zeros(b, c);
    for j in 0..b {
        let gj = logit_gradient(kind, logits.row(j), labels[j], counts);
        g.row_mut(j).copy_from_slice(&gj);
    }
    g
}

/// Attraction/repulsion decomposition of the classifier-weight gradient of
/// the batch-summed loss.
#[derive(Debug, Clone)]
pub struct GradientReport {
    /// `c x d`; row i is `dL/dw_i` (batch-summed).
    pub full: Matrix,
    /// `c x d`; row i is the attraction component from class-i samples.
    pub attraction: Matrix,
    /// `repulsion_parts[i]` is `c x d`; row k (k != i) is the repulsion
    /// component on `w_i` from class-k samples. Row i is zero.
    pub repulsion_parts: Vec<Matrix>,
    /// `||attraction_i||_2` per class.
    pub attraction_norms: Vec<f64>,
    /// `c x c`; entry (i, k) is `||repulsion_parts[i] row k||_2`, diagonal 0.
    pub repulsion_norms: Matrix,
    /// Row i of `full` divided by the class count `n_i` (zero row where the
    /// count is zero). Kept alongside the raw gradient because the balanced
    /// loss carries a factor `n_i` on every term of `dL/dw_i`.
    pub full_count_scaled: Matrix,
}

impl GradientReport {
    /// Max-abs residual of `full - (attraction + sum_k repulsion)`;
    /// the decomposition must reconstruct the full gradient.
    pub fn reconstruction_residual(&self) -> f64 {
        let c = self.full.rows();
        let d = self.full.cols();
        let mut worst: f64 = 0.0;
        for i in 0..c {
            for l in 0..d {
                let mut acc = self.attraction[(i, l)];
                for k in 0..c {
                    if k != i {
                        acc += self.repulsion_parts[i][(k, l)];
                    }
                }
                worst = worst.max((self.full[(i, l)] - acc).abs());
            }
        }
        worst
    }
}

/// Computes the gradient of the batch-summed loss with respect to every
/// classifier row `w_i`, decomposed by source class.
///
/// `h` is the feature batch (`b x d`), `w` the classifier (`c x d`); logits
/// are `z_{j,i} = w_i . h_j`. The `full` matrix is accumulated in one pass
/// (batch order) independently of the per-class parts, so the
/// reconstruction invariant is a real consistency check.
pub fn classifier_gradient(
    kind: LossKind,
    h: &Matrix,
    labels: &[usize],
    w: &Matrix,
    counts: &ClassCounts,
) -> Result<GradientReport> {
    if h.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "features {}x{} vs weights {}x{}",
            h.rows(),
            h.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if h.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows vs {} labels",
            h.rows(),
            labels.len()
        )));
    }
    let c = w.rows();
    let d = w.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidSpec(format!("label {bad} out of range (c={c})")));
    }

    let logits = h.matmul_nt(w)?;
    let g = batch_logit_gradients(kind, &logits, labels, counts);

    // Full gradient in a single pass over the batch.
    let full = g.matmul_tn(h)?;

    // Per-class parts.
    let mut attraction = Matrix::zeros(c, d);
    let mut repulsion_parts: Vec<Matrix> = (0..c).map(|_| Matrix::zeros(c, d)).collect();
    for (j, &y) in labels.iter().enumerate() {
        let hj = h.row(j);
        let gj = g.row(j);
        for i in 0..c {
            let gji = gj[i];
            if i == y {
                for (a, &hv) in attraction.row_mut(y).iter_mut().zip(hj) {
                    *a += gji * hv;
                }
            } else {
                for (r, &hv) in repulsion_parts[i].row_mut(y).iter_mut().zip(hj) {
                    *r += gji * hv;
                }
            }
        }
    }

    let attraction_norms: Vec<f64> = (0..c).map(|i| norm2(attraction.row(i))).collect();
    let mut repulsion_norms = Matrix::zeros(c, c);
    for i in 0..c {
        for k in 0..c {
            if k != i {
                repulsion_norms[(i, k)] = norm2(repulsion_parts[i].row(k));
            }
        }
    }

    let mut full_count_scaled = full.clone();
    for i in 0..c {
        let n = counts.counts()[i];
        let s = if n > 0.0 { 1.0 / n } else { 0.0 };
        for v in full_count_scaled.row_mut(i) {
            *v *= s;
        }
    }

    Ok(GradientReport {
        full,
        attraction,
        repulsion_parts,
        attraction_norms,
        repulsion_norms,
        full_count_scaled,
    })
}

/// Weighted feature mean of one class: `(1/n_i) sum_{j in class i} q_j h_j`.
/// Returns the vector and whether the class is present; an absent class
/// yields the zero vector and `false`.
pub fn weighted_class_mean(
    h: &Matrix,
    labels: &[usize],
    q_weights: &[f64],
    class: usize,
) -> (Vec<f64>, bool) {
    assert_eq!(h.rows(), labels.len());
    assert_eq!(h.rows(), q_weights.len());
    let mut mean = vec![0.0; h.cols()];
    let mut n = 0usize;
    for (j, &y) in labels.iter().enumerate() {
        if y == class {
            n += 1;
            for (m, &hv) in mean.iter_mut().zip(h.row(j)) {
                *m += q_weights[j] * hv;
            }
        }
    }
    if n == 0 {
        return (mean, false);
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    (mean, true)
}

/// Two-label weighted loss used with input mixing:
/// `lam * L(y_a) + (1 - lam) * L(y_b)`, batch mean.
pub fn mixed_mean_loss(
    kind: LossKind,
    logits: &Matrix,
    labels_a: &[usize],
    labels_b: &[usize],
    lam: f64,
    counts: &ClassCounts,
) -> f64 {
    lam * mean_loss(kind, logits, labels_a, counts)
        + (1.0 - lam) * mean_loss(kind, logits, labels_b, counts)
}

/// Logit gradients of the two-label weighted loss.
pub fn batch_logit_gradients_mixed(
    kind: LossKind,
    logits: &Matrix,
    labels_a: &[usize],
    labels_b: &[usize],
    lam: f64,
    counts: &ClassCounts,
) -> Matrix {
    let mut ga = batch_logit_gradients(kind, logits, labels_a, counts);
    let gb = batch_logit_gradients(kind, logits, labels_b, counts);
    ga.scale_in_place(lam);
    ga.axpy_in_place(1.0 - lam, &gb).expect("same shape");
    ga
}
