//! Classifier-geometry reference frames and balance metrics.
//!
//! The ideal classifier geometry for `c` classes is the simplex
//! equiangular tight frame: `c` unit vectors with every pairwise dot
//! product equal to `-1/(c-1)`, built as
//!
//! ```text
//! W* = sqrt(c/(c-1)) . P (I_c - (1/c) 1 1ᵀ)
//! ```
//!
//! with `P` a `d x c` partial orthogonal matrix (`PᵀP = I`). Three balance
//! metrics measure distance from that geometry: the spread of pairwise dot
//! products (`b_d2`), of pairwise cosines (`b_a2`), and of row norms
//! (`b_l2`); all are zero exactly on the frame.
//!
//! `b_d2`/`b_a2` keep the `1/(c-1)^2` outer normalization of the reference
//! formulas even though there are `c(c-1)` off-diagonal terms; the plain
//! population variance over `c(c-1)` terms is reported alongside as
//! `*_popvar`. The subtracted mean is the true mean of the off-diagonal
//! terms (anything else would make the ideal-frame value nonzero).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::matrix::{dot, norm2, Matrix};
use crate::numkit::qr::qr_orthonormal;
use crate::numkit::rng::Rng;

/// Simplex equiangular tight frame: `c` unit vectors in `R^d`, stored as
/// the rows of `w_star`.
#[derive(Debug, Clone)]
pub struct EtfFrame {
    pub w_star: Matrix,
}

impl EtfFrame {
    pub fn num_classes(&self) -> usize {
        self.w_star.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_star.cols()
    }
}

/// Builds a randomly oriented simplex frame for `c` classes in `R^d`.
/// Requires `d >= c`; when `d == c` the centered frame spans `c - 1`
/// dimensions, which is allowed.
pub fn etf_frame(c: usize, d: usize, rng: &mut Rng) -> Result<EtfFrame> {
    if c < 2 {
        return Err(Error::InvalidSpec(format!("frame needs c >= 2, got {c}")));
    }
    if d < c {
        return Err(Error::InvalidSpec(format!(
            "frame needs d >= c, got c={c}, d={d}"
        )));
    }
    let p = qr_orthonormal(&rng.gaussian_matrix(d, c))?;
    let scale = (c as f64 / (c as f64 - 1.0)).sqrt();
    // Row i of the output is scale * (p_col_i - mean of p columns).
    let mut w_star = Matrix::zeros(c, d);
    for i in 0..c {
        for l in 0..d {
            let mut centered = p[(l, i)];
            for j in 0..c {
                centered -= p[(l, j)] / c as f64;
            }
            w_star[(i, l)] = scale * centered;
        }
    }
    Ok(EtfFrame { w_star })
}

/// Balance metrics of a set of weight vectors (rows of a `c x d` matrix).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapseMetrics {
    /// Spread of pairwise dot products, `1/(c-1)^2` normalization.
    pub b_d2: f64,
    /// Spread of pairwise cosines, `1/(c-1)^2` normalization.
    pub b_a2: f64,
    /// Variance of row norms.
    pub b_l2: f64,
    /// Population variance of pairwise dot products over the `c(c-1)`
    /// off-diagonal terms.
    pub b_d2_popvar: f64,
    /// Population variance of pairwise cosines.
    pub b_a2_popvar: f64,
    /// Similarity matrix: `M[i][j] = (w_i.w_j) / sum_{k != i} w_i.w_k` off
    /// the diagonal, 0 on it. Rows whose off-diagonal dot sum is below the
    /// degeneracy floor hold NaN and are listed in `degenerate_rows`.
    pub similarity: Vec<Vec<f64>>,
    pub degenerate_rows: Vec<usize>,
    /// Smallest pairwise angle between rows, in degrees (0 = two rows
    /// share a direction).
    pub min_pairwise_angle_deg: f64,
    pub weight_norms: Vec<f64>,
}

/// Computes all balance metrics for the rows of `w`. Any zero-norm row is
/// an error (cosines would be undefined); a near-zero similarity row sum is
/// flagged, not an error.
pub fn balance_metrics(w: &Matrix) -> Result<CollapseMetrics> {
    let c = w.rows();
    if c < 2 {
        return Err(Error::InvalidSpec(format!(
            "balance metrics need c >= 2, got {c}"
        )));
    }
    let norms: Vec<f64> = (0..c).map(|i| norm2(w.row(i))).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateWeights(format!("row {i} has zero norm")));
    }

    let mut dots = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            if i != j {
                dots[(i, j)] = dot(w.row(i), w.row(j));
            }
        }
    }

    let pairs = (c * (c - 1)) as f64;
    let printed_norm = ((c - 1) * (c - 1)) as f64;

    let off_diag = |m: &Matrix, f: &mut dyn FnMut(usize, usize, f64)| {
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    f(i, j, m[(i, j)]);
                }
            }
        }
    };

    let mut dot_sum = 0.0;
    off_diag(&dots, &mut |_, _, v| dot_sum += v);
    let dot_mean = dot_sum / pairs;
    let mut dot_dev2 = 0.0;
    off_diag(&dots, &mut |_, _, v| dot_dev2 += (v - dot_mean) * (v - dot_mean));

    let mut cos_sum = 0.0;
    off_diag(&dots, &mut |i, j, v| cos_sum += v / (norms[i] * norms[j]));
    let cos_mean = cos_sum / pairs;
    let mut cos_dev2 = 0.0;
    let mut max_cos = f64::NEG_INFINITY;
    off_diag(&dots, &mut |i, j, v| {
        let cos = v / (norms[i] * norms[j]);
        cos_dev2 += (cos - cos_mean) * (cos - cos_mean);
        max_cos = max_cos.max(cos);
    });

    let norm_mean = norms.iter().sum::<f64>() / c as f64;
    let b_l2 = norms
        .iter()
        .map(|n| (n - norm_mean) * (n - norm_mean))
        .sum::<f64>()
        / c as f64;

    let mut similarity = vec![vec![0.0; c]; c];
    let mut degenerate_rows = Vec::new();
    for i in 0..c {
        let row_sum: f64 = (0..c).filter(|&j| j != i).map(|j| dots[(i, j)]).sum();
        if row_sum.abs() < 1e-12 {
            degenerate_rows.push(i);
            for j in 0..c {
                if j != i {
                    similarity[i][j] = f64::NAN;
                }
            }
        } else {
            for j in 0..c {
                if j != i {
                    similarity[i][j] = dots[(i, j)] / row_sum;
                }
            }
        }
    }

    let min_pairwise_angle_deg = max_cos.clamp(-1.0, 1.0).acos().to_degrees();

    Ok(CollapseMetrics {
        b_d2: dot_dev2 / printed_norm,
        b_a2: cos_dev2 / printed_norm,
        b_l2,
        b_d2_popvar: dot_dev2 / pairs,
        b_a2_popvar: cos_dev2 / pairs,
        similarity,
        degenerate_rows,
        min_pairwise_angle_deg,
        weight_norms: norms,
    })
}

/// Balance metrics of globally centered class-mean features, plus the
/// within-class scatter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMeanGeometry {
    pub metrics: CollapseMetrics,
    /// Mean squared distance of each class's features to its class mean.
    pub within_class_variance: Vec<f64>,
}

/// Computes per-class feature means, centers them by the global sample
/// mean, and runs [`balance_metrics`] on the centered means. Every class in
/// `0..num_classes` must be populated.
pub fn class_mean_geometry(
    h: &Matrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassMeanGeometry> {
    assert_eq!(h.rows(), labels.len());
    let d = h.cols();
    let n = h.rows();
    let mut counts = vec![0usize; num_classes];
    let mut means = Matrix::zeros(num_classes, d);
    let mut global = vec![0.0; d];
    for (j, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InvalidSpec(format!(
                "label {y} out of range (c={num_classes})"
            )));
        }
        counts[y] += 1;
        for (l, &v) in h.row(j).iter().enumerate() {
            means[(y, l)] += v;
            global[l] += v;
        }
    }
    if let Some(i) = counts.iter().position(|&cnt| cnt == 0) {
        return Err(Error::DegenerateWeights(format!("class {i} is empty")));
    }
    for v in &mut global {
        *v /= n as f64;
    }
    for i in 0..num_classes {
        for l in 0..d {
            means[(i, l)] /= counts[i] as f64;
        }
    }

    let mut within = vec![0.0; num_classes];
    for (j, &y) in labels.iter().enumerate() {
        let mut dist2 = 0.0;
        for (l, &v) in h.row(j).iter().enumerate() {
            let diff = v - means[(y, l)];
            dist2 += diff * diff;
        }
        within[y] += dist2;
    }
    for (i, v) in within.iter_mut().enumerate() {
        *v /= counts[i] as f64;
    }

    let mut centered = means;
    for i in 0..num_classes {
        for l in 0..d {
            centered[(i, l)] -= global[l];
        }
    }

    Ok(ClassMeanGeometry {
        metrics: balance_metrics(&centered)?,
        within_class_variance: within,
    })
}

/// Largest pairwise cosine among the weight rows listed in `minority_set`.
/// 1 means two of them share a direction (fully collapsed).
pub fn minority_collapse_score(w: &Matrix, minority_set: &[usize]) -> Result<f64> {
    if minority_set.len() < 2 {
        return Err(Error::InvalidSpec(
            "minority set needs at least two classes".into(),
        ));
    }
    let mut max_cos = f64::NEG_INFINITY;
    for (a, &i) in minority_set.iter().enumerate() {
        for &j in &minority_set[a + 1..] {
            let ni = norm2(w.row(i));
            let nj = norm2(w.row(j));
            if ni == 0.0 || nj == 0.0 {
                return Err(Error::DegenerateWeights(format!(
                    "zero-norm weight in minority pair ({i}, {j})"
                )));
            }
            max_cos = max_cos.max(dot(w.row(i), w.row(j)) / (ni * nj));
        }
    }
    Ok(max_cos)
}
