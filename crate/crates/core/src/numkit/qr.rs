//! Column orthonormalization via modified Gram-Schmidt.

use crate::error::{Error, Result};
use crate::numkit::matrix::{dot, norm2, Matrix};

/// Returns `Q` (same shape as `a`) with orthonormal columns spanning the
/// column space of `a`. Modified Gram-Schmidt with a second
/// re-orthogonalization pass; `QᵀQ = I` holds to well below 1e-10.
///
/// Requires `a.rows() >= a.cols()`. A pivot below `1e-12` relative to the
/// original column scale means the columns are numerically dependent and
/// yields `Error::Rank`.
pub fn qr_orthonormal(a: &Matrix) -> Result<Matrix> {
    let (n, k) = (a.rows(), a.cols());
    if n < k {
        return Err(Error::Dimension(format!(
            "qr_orthonormal needs rows >= cols, got {}x{}",
            n, k
        )));
    }
    // Work on columns; the matrix is row-major so gather/scatter explicitly.
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| a[(i, j)]).collect()).collect();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let scale = norm2(&cols[j]).max(1.0);
        let mut v = std::mem::take(&mut cols[j]);
        for _pass in 0..2 {
            for qi in &q {
                let r = dot(qi, &v);
                for (vv, qv) in v.iter_mut().zip(qi) {
                    *vv -= r * qv;
                }
            }
        }
        let pivot = norm2(&v);
        if pivot <= 1e-12 * scale {
            return Err(Error::Rank(format!(
                "column {} is numerically dependent (pivot {:.3e})",
                j, pivot
            )));
        }
        for vv in &mut v {
            *vv /= pivot;
        }
        q.push(v);
    }
    let mut out = Matrix::zeros(n, k);
    for (j, qj) in q.iter().enumerate() {
        for (i, &v) in qj.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng::Rng;

    fn gram_residual(q: &Matrix) -> f64 {
        let g = q.matmul_tn(q).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_is_fixed_point() {
        let q = qr_orthonormal(&Matrix::identity(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((q[(i, j)] - target).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn seeded_gaussian_8x3_is_orthonormal() {
        let mut rng = Rng::new(5);
        let a = rng.gaussian_matrix(8, 3);
        let q = qr_orthonormal(&a).unwrap();
        assert!(gram_residual(&q) <= 1e-10);
    }

    #[test]
    fn orthonormal_for_many_seeds_and_shapes() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let n = 2 + rng.below(30);
            let k = 1 + rng.below(n);
            let a = rng.gaussian_matrix(n, k);
            let q = qr_orthonormal(&a).unwrap();
            assert!(gram_residual(&q) <= 1e-10, "seed {seed} shape {n}x{k}");
        }
    }

    #[test]
    fn duplicated_column_is_rank_error() {
        let a = Matrix::from_rows(&[
            &[1.0, 1.0],
            &[2.0, 2.0],
            &[3.0, 3.0],
            &[4.0, 4.0],
        ]);
        assert!(matches!(qr_orthonormal(&a), Err(Error::Rank(_))));
    }

    #[test]
    fn span_is_preserved() {
        // Each original column must be reproducible from Q (Q Qᵀ a = a).
        let mut rng = Rng::new(13);
        let a = rng.gaussian_matrix(6, 4);
        let q = qr_orthonormal(&a).unwrap();
        let proj = q.matmul(&q.matmul_tn(&a).unwrap()).unwrap();
        let mut diff = proj;
        diff.axpy_in_place(-1.0, &a).unwrap();
        assert!(diff.max_abs() <= 1e-10);
    }
}
