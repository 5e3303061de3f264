use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition-number cap above which a symmetric matrix is treated as singular.
pub(crate) const CONDITION_CAP: f64 = 1e12;

/// Inverse of a symmetric positive semi-definite matrix through one
/// eigen-decomposition, rejecting matrices whose condition number exceeds `cap`.
pub(crate) fn spd_inverse(m: &DMatrix<f64>, cap: f64) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !(min > 0.0) || max / min > cap {
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::SingularDesign { condition, cap });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok(symmetrize(inv))
}

pub(crate) fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

/// `x^T A x`.
pub(crate) fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += a[(i, j)] * x[i];
        }
        acc += col * x[j];
    }
    acc
}

pub(crate) fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
