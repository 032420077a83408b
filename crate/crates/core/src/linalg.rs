//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Sign and log-magnitude of the determinant of the row-major `n x n`
/// matrix in `a`, by LU with partial pivoting. `a` is overwritten.
/// Returns `None` for an exactly singular matrix.
pub(crate) fn log_det_lu(a: &mut [f64], n: usize) -> Option<(f64, f64)> {
    debug_assert_eq!(a.len(), n * n);
    let mut sign = 1.0;
    let mut log_abs = 0.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            sign = -sign;
        }
        let d = a[col * n + col];
        if d < 0.0 {
            sign = -sign;
        }
        log_abs += d.abs().ln();
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f != 0.0 {
                for k in col + 1..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
            }
        }
    }
    Some((sign, log_abs))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive-definite matrix; falls back to LU when
/// the Cholesky factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = match m.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular(format!("{what} is singular")))?,
    };
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what} is singular")));
    }
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_log_det_matches_nalgebra() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.5, -1.0, 3.0, 0.2, 0.3, 0.1, -4.0]);
        let det = m.determinant();
        let mut buf: Vec<f64> = m.transpose().iter().cloned().collect();
        let (sign, la) = log_det_lu(&mut buf, 3).unwrap();
        assert!((sign * la.exp() - det).abs() < 1e-12 * det.abs());
    }

    #[test]
    fn singular_matrix_detected() {
        let mut buf = vec![1.0, 2.0, 2.0, 4.0];
        assert!(log_det_lu(&mut buf, 2).is_none());
    }
}
