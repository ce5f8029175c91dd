//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Column `j` of a column-major matrix as a slice.
#[inline]
pub fn col(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[j * n..(j + 1) * n]
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Copies the upper triangle onto the lower one.
pub fn mirror_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = m.clone().symmetric_eigenvalues();
    ev.as_mut_slice().sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}
