//! Small symmetric-matrix helpers shared by the transport and shrinkage
//! modules.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Relative eigenvalue floor below which a matrix is treated as singular.
pub(crate) const EIG_RELATIVE_FLOOR: f64 = 1e-12;

/// Symmetric positive-semidefinite square root via eigendecomposition.
/// Slightly negative eigenvalues from rounding are clamped to zero.
pub(crate) fn symmetric_sqrt(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = matrix.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Symmetric inverse square root; errors when the matrix is numerically
/// singular relative to its largest eigenvalue.
pub(crate) fn symmetric_inv_sqrt(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = matrix.clone().symmetric_eigen();
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let floor = max * EIG_RELATIVE_FLOOR;
    if eig.eigenvalues.iter().any(|&l| l <= floor) {
        return Err(Error::NotPositiveDefinite);
    }
    let inv_sqrt_vals = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt_vals) * eig.eigenvectors.transpose())
}

/// Max absolute asymmetry |m - m^T|.
pub(crate) fn asymmetry(matrix: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..matrix.nrows() {
        for j in (i + 1)..matrix.ncols() {
            worst = worst.max((matrix[(i, j)] - matrix[(j, i)]).abs());
        }
    }
    worst
}

/// (m + m^T) / 2.
pub(crate) fn symmetrize(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    (matrix + matrix.transpose()) * 0.5
}
