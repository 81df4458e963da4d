//! Singular values by one-sided (Hestenes) Jacobi rotations.
//!
//! The columns of the working copy are rotated pairwise until they are
//! mutually orthogonal; the singular values are then the column norms.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

/// Singular values of `a`, sorted descending, `min(rows, cols)` of them.
pub fn svd_values(a: &Matrix) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::dim("svd_values", "empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite {
            context: "svd_values input".into(),
        });
    }
    // Rotate the shorter side so the column count is min(rows, cols).
    let (m, n, cols) = if a.rows() >= a.cols() {
        (a.rows(), a.cols(), columns(a))
    } else {
        (a.cols(), a.rows(), a.row_iter().map(<[f64]>::to_vec).collect())
    };
    let mut cols: Vec<Vec<f64>> = cols;
    debug_assert!(cols.iter().all(|c| c.len() == m));

    let mut sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = sq[p];
                let beta = sq[q];
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                sq[p] = cp.iter().map(|v| v * v).sum();
                sq[q] = cq.iter().map(|v| v * v).sum();
            }
        }
        if !rotated {
            break;
        }
    }
    let mut values: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

fn columns(a: &Matrix) -> Vec<Vec<f64>> {
    (0..a.cols())
        .map(|c| (0..a.rows()).map(|r| a.get(r, c)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_values_come_back_sorted() {
        let a = Matrix::diag(&[1.0, 3.0, 2.0]);
        let s = svd_values(&a).unwrap();
        assert_eq!(s.len(), 3);
        for (got, want) in s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_rows_have_unit_values() {
        // Rows of a rotation embedded in 2x3.
        let th: f64 = 0.7;
        let a = Matrix::from_rows(&[
            vec![th.cos(), -th.sin(), 0.0],
            vec![th.sin(), th.cos(), 0.0],
        ])
        .unwrap();
        let s = svd_values(&a).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(svd_values(&Matrix::zeros(0, 3)).is_err());
        let mut a = Matrix::zeros(2, 2);
        a.set(0, 0, f64::NAN);
        assert!(svd_values(&a).is_err());
    }

    #[test]
    fn zero_matrix_has_zero_values() {
        let s = svd_values(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(s, vec![0.0; 3]);
    }
}
